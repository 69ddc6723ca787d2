"""Command-line driver.

Every subcommand reads the same config: defaults, then ``--config FILE``,
then ``--set key=value`` overrides (dotted keys reach the scene block), then
the dedicated flags such as ``--seed``. Later sources win.
"""

from __future__ import annotations

import argparse
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from dgdet.config import ExperimentConfig
from dgdet.dga import dump_assignment
from dgdet.geometry import as_array
from dgdet.metrics import evaluate
from dgdet.nms import build_scaler, dg_nms_keep, read_detections, vanilla_nms_keep, write_detections
from dgdet.pipeline import (
    StageError,
    axis_overrides,
    density_json,
    detections_of,
    make_grid,
    run_pipeline,
    run_scene,
    run_sweep,
    stage,
)
from dgdet.scene import generate_scene, load_scenes, save_scenes


def load_config(args) -> ExperimentConfig:
    with stage("config"):
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        flags = {}
        if args.seed is not None:
            flags["seed"] = args.seed
        if args.num_scenes is not None:
            flags["num_scenes"] = args.num_scenes
        cfg = cfg.with_overrides(args.set or [])
        return cfg.with_overrides(flags) if flags else cfg


def _scenes(args, cfg):
    if getattr(args, "scenes", None):
        with stage("read"):
            return load_scenes(args.scenes)
    with stage("simulate"):
        return [generate_scene(cfg.scene, s) for s in cfg.seeds]


def cmd_simulate(args, cfg):
    scenes = _scenes(args, cfg)
    with stage("write"):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_scenes(args.out, scenes, cfg.scene)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_assign(args, cfg):
    scenes = _scenes(args, cfg)
    grid = make_grid(cfg)
    out = Path(args.out)
    for sc in scenes:
        run = run_scene(cfg, sc.seed, grid, sc)
        with stage("write"):
            out.mkdir(parents=True, exist_ok=True)
            tag = f"seed_{sc.seed}"
            dump_assignment(out / f"assignment_{tag}.json", run.assignment, grid.levels, {"seed": int(sc.seed)})
            (out / f"density_{tag}.json").write_text(density_json(run, grid))
            write_detections(out / f"detections_{tag}.jsonl", detections_of(run))
    cfg.save(out / "config.yaml")
    print(f"assigned {len(scenes)} scenes into {out}")


def _by_image(paths):
    groups = defaultdict(list)
    with stage("read"):
        for p in paths:
            for det in read_detections(p):
                groups[det.image].append(det)
    return groups


def cmd_nms(args, cfg):
    groups = _by_image(args.detections)
    kept = []
    with stage("nms"):
        for image in sorted(groups, key=lambda v: (v is None, v)):
            dets = groups[image]
            boxes = as_array([d.box for d in dets])
            scores = np.array([d.score for d in dets])
            dens = np.array([d.density for d in dets])
            if cfg.nms == "dg":
                keep = dg_nms_keep(boxes, scores, dens, cfg.sigma, scaler=build_scaler(dens, cfg.nms_variant))
            else:
                keep = vanilla_nms_keep(boxes, scores, cfg.vanilla_threshold)
            kept.extend(dets[k] for k in keep)
    with stage("write"):
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_detections(args.out, kept)
    print(f"kept {len(kept)} detections in {args.out}")


def cmd_evaluate(args, cfg):
    with stage("read"):
        scenes = load_scenes(args.scenes)
    groups = _by_image(args.detections)
    with stage("evaluate"):
        boxes, scores = [], []
        for sc in scenes:
            dets = groups.get(sc.seed, [])
            boxes.append(as_array([d.box for d in dets]))
            scores.append(np.array([d.score for d in dets], dtype=float))
        report = evaluate(boxes, scores, [s.gts for s in scenes], [s.crowd_mask() for s in scenes],
                          cfg.eval_iou, cfg.per_image_ji)
    with stage("write"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        (out / "metrics.csv").write_text(report.to_csv())
    print(report.to_json(), end="")


def cmd_pipeline(args, cfg):
    result = run_pipeline(cfg, out_dir=args.out)
    print(result.report_json(), end="")


def cmd_sweep(args, cfg):
    values = [yaml.safe_load(v) for v in args.values]
    with stage("config"):
        for v in values:
            axis_overrides(args.axis, v)
    text = run_sweep(cfg, args.axis, values, args.out)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (repeatable; dotted keys for scene.*)")
    common.add_argument("--seed", type=int, help="first scene seed")
    common.add_argument("--num-scenes", type=int, help="number of consecutive seeds")

    p = argparse.ArgumentParser(prog="dgdet", description="Density-guided anchor assignment experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate synthetic scenes")
    s.add_argument("--out", required=True, help="scenes JSON file")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("assign", parents=[common], help="solve and decode assignments per scene")
    s.add_argument("--scenes", help="scenes JSON (default: generate from config)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_assign)

    s = sub.add_parser("nms", parents=[common], help="suppress detections (JSONL in, JSONL out)")
    s.add_argument("--detections", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_nms)

    s = sub.add_parser("evaluate", parents=[common], help="AP50 / MR / JI report")
    s.add_argument("--scenes", required=True)
    s.add_argument("--detections", nargs="+", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", parents=[common], help="end-to-end run")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("sweep", parents=[common], help="one-axis ablation sweep")
    s.add_argument("--axis", required=True, help="config field, or th_pos/th_neg with values like 0.7/0.8")
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--out", help="CSV file")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        args.func(args, cfg)
    except StageError as exc:
        print(f"dgdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
