"""End-to-end runs: simulate, cost, solve, assign, suppress, evaluate.

Each stage is wrapped so a failure surfaces as :class:`StageError` naming the
stage. Runs are pure functions of the config, so repeated runs write
byte-identical artifacts.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dgdet.config import ExperimentConfig, known_fields
from dgdet.cost import (
    ConfigurationError,
    apply_candidates,
    center_prior_candidates,
    combine_costs,
    iou_cost,
    iou_threshold_candidates,
    level_cost,
    overlap_aware_cost_from_iou,
    preferred_levels,
    score_cost,
)
from dgdet.dga import (
    AssignmentResult,
    DetectionLoss,
    UOTLossTerms,
    decode_assignment,
    detection_loss,
    dump_assignment,
    uot_loss,
)
from dgdet.geometry import BBox, box_centers, pairwise_iou, to_boxes
from dgdet.metrics import EvalReport, evaluate
from dgdet.nms import Detection, build_scaler, dg_nms_keep, vanilla_nms_keep, write_detections
from dgdet.scene import (
    AnchorGrid,
    Predictions,
    Scene,
    bilinear_density,
    build_anchor_grid,
    density_from_plan,
    generate_scene,
    save_scenes,
    simulate_predictions,
)
from dgdet.uot import TransportPlan, TransportProblem, solve_uot

REPORT_SCHEMA = "dgdet.report/1"
DENSITY_SCHEMA = "dgdet.density/1"
SWEEP_COLUMNS = (
    "axis", "value", "runs", "ap50", "mr", "ji", "recall", "recall_crowd", "recall_sparse",
    "false_positives", "kept_per_image", "positives_per_gt", "candidates_per_gt", "loss_total",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # tag and re-raise
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


@dataclass
class SceneRun:
    """Everything computed for one scene up to (not including) suppression."""

    scene: Scene
    predictions: Predictions
    problem: TransportProblem
    plan: TransportPlan
    assignment: AssignmentResult
    candidates_per_gt: float
    uot_terms: UOTLossTerms
    loss: DetectionLoss
    det_anchors: np.ndarray  # anchor index of each pre-suppression detection
    det_density: np.ndarray

    @property
    def det_boxes(self) -> np.ndarray:
        return self.predictions.boxes[self.det_anchors]

    @property
    def det_scores(self) -> np.ndarray:
        return self.predictions.scores[self.det_anchors]


def make_grid(config: ExperimentConfig) -> AnchorGrid:
    with stage("grid"):
        return build_anchor_grid(config.scene.image_size, config.levels, config.strides, config.anchor_scale,
                                 config.scene.aspect)


def build_problem(config: ExperimentConfig, scene: Scene, grid: AnchorGrid, pred: Predictions):
    """Cost matrix and target density for one scene; returns (problem, candidate mask, phi)."""
    phi = pairwise_iou(scene.gts, pred.boxes)
    if config.cost_type == "overlap_aware":
        c_iou = overlap_aware_cost_from_iou(phi, scene.gt_iou())
    else:
        c_iou = iou_cost(scene.gts, pred.boxes)
    c_level = None
    if config.use_level_cost:
        prefs = [preferred_levels(b, config.soi, config.level_band) for b in to_boxes(scene.gts)]
        c_level = level_cost(prefs, grid.levels)
    cost = combine_costs(c_iou, c_level, config.gamma)
    if config.score_term:
        cost = cost + score_cost(pred.scores)[None, :]
    if config.prior == "center_prior":
        cand = center_prior_candidates(scene.gts, grid, config.radius)
    else:
        cand = iou_threshold_candidates(scene.gts, grid.boxes, config.iou_threshold)
    cost = apply_candidates(cost, cand)
    # target density: predicted scores over candidate anchors, scaled to the object count
    support = cand.mask.any(axis=0)
    mass = np.where(support, pred.scores, 0.0)
    b = mass * (scene.num_gts / mass.sum()) if mass.sum() > 0 else mass
    problem = TransportProblem(cost, b, config.resolved_epsilon, rho=config.rho)
    return problem, cand, phi


def select_detections(config: ExperimentConfig, pred: Predictions) -> np.ndarray:
    """Anchors whose score clears the threshold, best ``pre_nms_topk`` kept."""
    idx = np.flatnonzero(pred.scores > config.score_threshold)
    order = np.lexsort((idx, -pred.scores[idx]))
    return idx[order[: config.pre_nms_topk]]


def run_scene(config: ExperimentConfig, seed: int, grid: AnchorGrid | None = None, scene: Scene | None = None) -> SceneRun:
    grid = grid if grid is not None else make_grid(config)
    with stage("simulate"):
        if scene is None:
            scene = generate_scene(config.scene, seed)
        pred = simulate_predictions(scene, grid, config.noise, config.score_noise, scene.seed, config.jitter_growth)
    with stage("cost"):
        problem, cand, phi = build_problem(config, scene, grid, pred)
    with stage("uot"):
        plan = solve_uot(problem, config.max_iter, config.tol)
    with stage("assign"):
        assignment = decode_assignment(plan, config.th_pos, config.th_neg, config.strategy, config.fix_k, iou=phi)
    with stage("loss"):
        terms = uot_loss(plan, problem, config.transport_term, config.object_wise, config.anchor_wise)
        loss = detection_loss(assignment, pred.scores, pred.boxes, scene.gts, terms, config.gamma1,
                              config.gamma2, config.normalizer)
    with stage("density"):
        density = density_from_plan(plan, grid)
        anchors = select_detections(config, pred)
        if config.density_lookup == "anchor":
            det_density = density.values[anchors]
        else:
            det_density = bilinear_density(density, grid, anchors, box_centers(pred.boxes[anchors]))
    return SceneRun(scene, pred, problem, plan, assignment, float(cand.counts().mean()), terms, loss,
                    anchors, np.maximum(det_density, 0.0))


def suppress(config: ExperimentConfig, run: SceneRun, mode: str | None = None, variant: str | None = None,
             threshold: float | None = None) -> np.ndarray:
    """Indices into the run's detections kept by the configured (or given) NMS."""
    mode = mode or config.nms
    with stage("nms"):
        if run.det_anchors.size == 0:
            return np.zeros(0, dtype=int)
        if mode == "dg":
            scaler = build_scaler(run.det_density, variant or config.nms_variant)
            return dg_nms_keep(run.det_boxes, run.det_scores, run.det_density, config.sigma, scaler=scaler)
        if mode == "vanilla":
            return vanilla_nms_keep(run.det_boxes, run.det_scores, threshold or config.vanilla_threshold)
        raise ConfigurationError(f"unknown NMS mode {mode!r}")


def detections_of(run: SceneRun, keep: np.ndarray | None = None) -> list[Detection]:
    idx = np.arange(run.det_anchors.size) if keep is None else keep
    return [
        Detection(BBox(*(float(v) for v in run.det_boxes[k])), float(run.det_scores[k]), float(run.det_density[k]),
                  anchor=int(run.det_anchors[k]), image=int(run.scene.seed))
        for k in idx
    ]


def evaluate_runs(config: ExperimentConfig, runs: list[SceneRun], keeps: list[np.ndarray]) -> EvalReport:
    with stage("evaluate"):
        return evaluate(
            [r.det_boxes[k] for r, k in zip(runs, keeps)],
            [r.det_scores[k] for r, k in zip(runs, keeps)],
            [r.scene.gts for r in runs],
            [r.scene.crowd_mask() for r in runs],
            config.eval_iou,
            config.per_image_ji,
        )


@dataclass
class PipelineResult:
    report: EvalReport
    runs: list[SceneRun]
    keeps: list[np.ndarray]
    scene_reports: list[EvalReport]

    def summary(self) -> dict:
        runs = self.runs
        m = sum(r.scene.num_gts for r in runs)
        return {
            "candidates_per_gt": float(np.mean([r.candidates_per_gt for r in runs])),
            "positives_per_gt": sum(r.assignment.positives.size for r in runs) / m,
            "ignored_per_gt": sum(r.assignment.ignored.size for r in runs) / m,
            "gts_without_positives": sum(len(r.assignment.gts_without_positives) for r in runs),
            "kept_per_image": float(np.mean([k.size for k in self.keeps])),
            "detections_per_image": float(np.mean([r.det_anchors.size for r in runs])),
            "crowd_pairs_per_image": float(np.mean([r.scene.crowd_pairs for r in runs])),
            "solver_converged": all(r.plan.converged for r in runs),
            "solver_iterations": int(max(r.plan.iterations for r in runs)),
            "loss": {k: float(np.mean([r.loss.as_dict()[k] for r in runs])) for k in ("cls", "loc", "uot", "total")},
            "uot_terms": {k: float(np.mean([r.uot_terms.as_dict()[k] for r in runs]))
                          for k in ("transport", "object_wise", "anchor_wise", "total")},
        }

    def report_json(self) -> str:
        doc = {"schema": REPORT_SCHEMA, "metrics": self.report.to_dict(), "summary": self.summary()}
        return json.dumps(_clean(doc), indent=1, sort_keys=True) + "\n"

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope"] + EvalReport.csv_header())
        for r, rep in zip(self.runs, self.scene_reports):
            w.writerow([f"seed_{r.scene.seed}"] + rep.csv_row())
        w.writerow(["all"] + self.report.csv_row())
        return buf.getvalue()


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, float) and math.isnan(x):
        return None
    return x


def density_json(run: SceneRun, grid: AnchorGrid) -> str:
    values = run.plan.col_mass
    nz = np.flatnonzero(values > 0)
    doc = {
        "schema": DENSITY_SCHEMA,
        "seed": int(run.scene.seed),
        "num_anchors": int(values.size),
        "total": float(values.sum()),
        "strides": {str(k): v for k, v in grid.strides.items()},
        "entries": [
            {"anchor": int(j), "level": int(grid.levels[j]), "row": int(grid.rows[j]), "col": int(grid.cols[j]),
             "value": float(values[j])}
            for j in nz
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_artifacts(out_dir, config: ExperimentConfig, result: PipelineResult, grid: AnchorGrid) -> None:
    with stage("write"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.yaml")
        save_scenes(out / "scenes.json", [r.scene for r in result.runs], config.scene)
        for run, keep in zip(result.runs, result.keeps):
            tag = f"seed_{run.scene.seed}"
            dump_assignment(out / f"assignment_{tag}.json", run.assignment, grid.levels,
                            {"seed": int(run.scene.seed), "loss": run.loss.as_dict(), "uot": run.uot_terms.as_dict()})
            (out / f"density_{tag}.json").write_text(density_json(run, grid))
            write_detections(out / f"detections_{tag}.jsonl", detections_of(run, keep))
        (out / "report.json").write_text(result.report_json())
        (out / "metrics.csv").write_text(result.metrics_csv())


def run_pipeline(config: ExperimentConfig, out_dir=None, scenes: list[Scene] | None = None) -> PipelineResult:
    """Run every configured seed (or the given scenes); write artifacts if an output dir is set."""
    grid = make_grid(config)
    if scenes is None:
        runs = [run_scene(config, s, grid) for s in config.seeds]
    else:
        runs = [run_scene(config, sc.seed, grid, sc) for sc in scenes]
    keeps = [suppress(config, r) for r in runs]
    report = evaluate_runs(config, runs, keeps)
    scene_reports = [evaluate_runs(config, [r], [k]) for r, k in zip(runs, keeps)]
    result = PipelineResult(report, runs, keeps, scene_reports)
    out_dir = out_dir if out_dir is not None else config.output_dir
    if out_dir is not None:
        write_artifacts(out_dir, config, result, grid)
    return result


# sweeps

PAIR_AXIS = "th_pos/th_neg"


def axis_overrides(axis: str, value) -> dict:
    """Config overrides for one sweep value."""
    if axis == PAIR_AXIS:
        pos, neg = (value.split("/") if isinstance(value, str) else value)
        return {"th_pos": float(pos), "th_neg": float(neg)}
    if axis not in known_fields():
        raise ConfigurationError(f"unknown sweep axis {axis!r}")
    return {axis: value}


def _value_label(value) -> str:
    if isinstance(value, (list, tuple)):
        return "/".join(str(v) for v in value)
    return str(value)


def _sweep_job(config: ExperimentConfig, seed: int) -> dict:
    cfg = config.with_overrides({"seed": seed, "num_scenes": 1, "output_dir": None})
    res = run_pipeline(cfg)
    rep, s = res.report, res.summary()
    return {
        "ap50": rep.ap50, "mr": rep.mr, "ji": rep.ji, "recall": rep.recall,
        "recall_crowd": rep.recall_crowd, "recall_sparse": rep.recall_sparse,
        "false_positives": rep.false_positives, "kept_per_image": s["kept_per_image"],
        "positives_per_gt": s["positives_per_gt"], "candidates_per_gt": s["candidates_per_gt"],
        "loss_total": s["loss"]["total"],
    }


def run_sweep(config: ExperimentConfig, axis: str, values, out_path=None) -> str:
    """One run per value per seed across worker threads; CSV of mean metrics per value."""
    configs = [config.with_overrides(axis_overrides(axis, v)) for v in values]
    jobs = [(i, c, s) for i, c in enumerate(configs) for s in config.seeds]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(lambda job: _sweep_job(job[1], job[2]), jobs))
    # single-threaded reduce in submission order
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for i, value in enumerate(values):
        rows = [r for (j, _, _), r in zip(jobs, results) if j == i]
        means = []
        for col in SWEEP_COLUMNS[3:]:
            vals = np.array([r[col] for r in rows], dtype=float)
            finite = vals[~np.isnan(vals)]
            means.append(repr(float(finite.mean())) if finite.size else "nan")
        w.writerow([axis, _value_label(value), len(rows)] + means)
    text = buf.getvalue()
    if out_path is not None:
        with stage("write"):
            Path(out_path).parent.mkdir(parents=True, exist_ok=True)
            Path(out_path).write_text(text)
    return text
