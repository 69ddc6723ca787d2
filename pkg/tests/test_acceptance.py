"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]`` / ``[FAIL]`` line with the measured
numbers, then asserts. Run ``pytest tests/test_acceptance.py -v`` (the lines
are written straight to the terminal) or ``python tests/test_acceptance.py``.
"""

import csv
import io
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from dgdet.config import ExperimentConfig
from dgdet.cost import overlap_aware_cost, overlap_aware_cost_from_iou
from dgdet.dga import IGNORE, NEGATIVE, POSITIVE, decode_assignment, row_labels
from dgdet.geometry import BBox, iou
from dgdet.metrics import ap50, jaccard_index, log_average_miss_rate
from dgdet.nms import decay_factor, dg_nms_keep, vanilla_nms_keep
from dgdet.pipeline import build_problem, evaluate_runs, make_grid, run_scene, run_sweep, suppress
from dgdet.scene import generate_scene, simulate_predictions
from dgdet.uot import TransportProblem, brute_force_uot, solve_uot

LINES = []


@pytest.fixture
def emit(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def _emit(number, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        LINES.append(line)
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print("\n" + line)
        else:
            print(line)

    return _emit


def test_criterion_1_uot_oracle(emit):
    rng = np.random.default_rng(2024)
    worst, fails = 0.0, 0
    start = time.perf_counter()
    for _ in range(200):
        m, n = rng.integers(1, 4, size=2)
        C = rng.uniform(0, 3, size=(m, n))
        problem = TransportProblem(C, rng.uniform(0.2, 2.0, n), epsilon=rng.uniform(0.1, 1.0),
                                   a=rng.uniform(0.5, 1.5, m), rho=rng.uniform(0.5, 2.0))
        ours = solve_uot(problem).objective
        oracle = brute_force_uot(problem).objective
        gap = abs(ours - oracle) / (1 + abs(oracle))
        worst = max(worst, gap)
        fails += gap > 1e-3
    elapsed = time.perf_counter() - start
    ok = fails == 0 and elapsed < 10
    emit(1, ok, f"200 problems, worst relative gap {worst:.2e} (tol 1e-3), {elapsed:.2f}s (< 10s)")
    assert ok


def test_criterion_2_cost_exactness(emit):
    rng = np.random.default_rng(7)
    zero = 0.0
    for _ in range(200):
        m, n = rng.integers(1, 6, size=2)
        phi = rng.uniform(0.01, 0.99, size=(m, n))
        psi = np.triu(rng.uniform(0, 0.9, size=(m, m)), 1)
        psi = psi + psi.T + np.eye(m)
        i, j = rng.integers(m), rng.integers(n)
        phi[i, j] = 1.0
        phi[np.arange(m) != i, j] = np.minimum(phi[np.arange(m) != i, j], 0.99)
        zero = max(zero, abs(overlap_aware_cost_from_iou(phi, psi)[i, j]))

    grid = np.linspace(0.001, 1.0, 1000)[None, :]
    closed = (1 - grid) * -np.log(np.maximum(grid, 1e-7))
    err = np.abs(overlap_aware_cost_from_iou(grid, np.ones((1, 1))) - closed).max()

    bad = 0
    for _ in range(1000):
        m, n = rng.integers(2, 6), rng.integers(1, 5)
        phi = rng.uniform(0.01, 0.98, size=(m, n))
        psi = np.triu(rng.uniform(0, 0.9, size=(m, m)), 1)
        psi = psi + psi.T + np.eye(m)
        i, j = rng.integers(m), rng.integers(n)
        k = (i + 1 + rng.integers(m - 1)) % m
        base = overlap_aware_cost_from_iou(phi, psi)[i, j]
        own, foreign = phi.copy(), phi.copy()
        own[i, j] += 0.01
        foreign[k, j] += 0.01
        bad += not overlap_aware_cost_from_iou(own, psi)[i, j] < base
        bad += not overlap_aware_cost_from_iou(foreign, psi)[i, j] > base
    ok = zero == 0.0 and err <= 1e-9 and bad == 0
    emit(2, ok, f"cost at phi=1 max {zero:.1e}; closed-form error {err:.1e} (tol 1e-9); "
                f"monotonicity violations {bad}/2000 checks")
    assert ok


def test_criterion_3_fig3_scenario(emit):
    gt1, gt2 = BBox(0, 0, 10, 30), BBox(6, 0, 16, 30)
    pred1, pred2 = BBox(-3, 0, 7, 30), BBox(3, 0, 13, 30)
    same_phi = math.isclose(iou(gt1, pred1), iou(gt1, pred2))
    C = overlap_aware_cost([gt1, gt2], [pred1, pred2])
    plan = solve_uot(TransportProblem(C, np.ones(2), epsilon=0.1))
    ok = same_phi and C[0, 0] < C[0, 1] and plan.pi[0, 0] > plan.pi[0, 1]
    emit(3, ok, f"phi(GT1)={iou(gt1, pred1):.3f} both; C11={C[0, 0]:.4f} < C12={C[0, 1]:.4f}; "
                f"pi11={plan.pi[0, 0]:.4f} > pi12={plan.pi[0, 1]:.4f}")
    assert ok


def test_criterion_4_assignment_decode(emit):
    worked = decode_assignment(np.array([[0.5, 0.3, 0.1, 0.05, 0.05]]), 0.7, 0.8).labels.tolist()
    worked_ok = worked == [POSITIVE, IGNORE, NEGATIVE, NEGATIVE, NEGATIVE]

    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(1000):
        m, n = rng.integers(1, 5), rng.integers(1, 12)
        pi = rng.uniform(size=(m, n)) * (rng.uniform(size=(m, n)) < 0.7)
        th_pos = rng.uniform(0.05, 0.95)
        th_neg = rng.uniform(th_pos, 1.0)
        res = decode_assignment(pi, th_pos, th_neg)
        claims = row_labels(pi, th_pos, th_neg) == POSITIVE
        pos = res.positives
        bad += res.positives.size + res.negatives.size + res.ignored.size != n
        bad += not np.all(res.matched_gt[pos] >= 0)
        bad += not np.all((res.weights[pos] > 0) & (res.weights[pos] <= 1))
        bad += not np.all(res.weights[res.labels != POSITIVE] == 0)
        for i in range(m):
            mine = res.positives_of(i)
            bad += mine.size > 0 and res.weights[mine].max() != 1.0
        for j in pos:
            bad += not (claims[res.matched_gt[j], j] and pi[res.matched_gt[j], j] == pi[claims[:, j], j].max())

    collision = decode_assignment(np.array([[0.4, 0.05], [0.3, 0.02]]), 0.7, 0.8)
    swapped = decode_assignment(np.array([[0.3, 0.05], [0.4, 0.02]]), 0.7, 0.8)
    collide_ok = (collision.matched_gt[0] == 0 and 1 in collision.gts_without_positives
                  and swapped.matched_gt[0] == 1 and 0 in swapped.gts_without_positives)
    ok = worked_ok and bad == 0 and collide_ok
    emit(4, ok, f"worked example {worked}; invariant violations {bad} over 1000 plans; "
                f"collisions resolved by column argmax: {collide_ok}")
    assert ok


def test_criterion_5_dgnms(emit):
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(1, 60))
        xy = rng.uniform(0, 80, size=(n, 2))
        boxes = np.hstack([xy, xy + rng.uniform(8, 30, size=(n, 2))])
        scores = rng.uniform(0.05, 1, n)
        for variant in ("square", "linear", "sqrt"):
            kept = dg_nms_keep(boxes, scores, np.full(n, rng.uniform(0, 3)), variant=variant)
            mismatches += not np.array_equal(kept, vanilla_nms_keep(boxes, scores, 0.5))

    # variant ordering on simulated crowded scenes
    cfg = ExperimentConfig()
    grid = make_grid(cfg)
    violations = 0
    for seed in range(100):
        run = run_scene(cfg, seed, grid)
        sizes = [suppress(cfg, run, "dg", v).size for v in ("sqrt", "linear", "square")]
        violations += not sizes[0] >= sizes[1] >= sizes[2]
    decay_err = abs(decay_factor(0.5, 0.5) - math.exp(-0.5))
    ok = mismatches == 0 and violations == 0 and decay_err <= 1e-12
    emit(5, ok, f"uniform-density mismatches {mismatches}/300; variant ordering violations "
                f"{violations}/100 scenes; decay error {decay_err:.1e} (tol 1e-12)")
    assert ok


def _paired_fraction(scene):
    """Share of GTs placed in an overlapping pair (as partner or host)."""
    involved = set(np.flatnonzero(scene.partner >= 0)) | set(scene.partner[scene.partner >= 0])
    return len(involved) / scene.num_gts


def _benchmark(noise):
    start = time.perf_counter()
    out = {}
    for overlap in ("crowded", "sparse"):
        cfg = ExperimentConfig(num_scenes=50, noise=noise).with_overrides({"scene.overlap": overlap})
        grid = make_grid(cfg)
        runs = [run_scene(cfg, s, grid) for s in cfg.seeds]
        modes = {"dg": ("dg", None), "v05": ("vanilla", 0.5), "v08": ("vanilla", 0.8)}
        for name, (mode, thr) in modes.items():
            reps = [evaluate_runs(cfg, [r], [suppress(cfg, r, mode, threshold=thr)]) for r in runs]
            out[overlap, name, "crowd"] = float(np.nanmean([x.recall_crowd for x in reps])) if overlap == "crowded" else None
            out[overlap, name, "fp"] = float(np.mean([x.false_positives for x in reps]))
        scenes = [r.scene for r in runs]
        out[overlap, "paired"] = min(_paired_fraction(s) for s in scenes)
        out[overlap, "crowd_frac"] = float(np.mean([s.crowd_mask().mean() for s in scenes]))
        out[overlap, "gts"] = min(s.num_gts for s in scenes)
    return out, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_crowd_benchmark(emit):
    res, elapsed = _benchmark(0.1)
    scenes_ok = res["crowded", "gts"] >= 20 and res["crowded", "paired"] >= 0.3
    recall_ok = res["crowded", "dg", "crowd"] >= res["crowded", "v05", "crowd"]
    fp_ok = res["sparse", "dg", "fp"] <= res["sparse", "v08", "fp"]
    tight, _ = _benchmark(0.02)
    tight_ok = tight["crowded", "dg", "crowd"] >= tight["crowded", "v05", "crowd"] and \
        tight["sparse", "dg", "fp"] <= tight["sparse", "v08", "fp"]
    ok = scenes_ok and recall_ok and fp_ok and tight_ok and elapsed < 60
    emit(6, ok, f"50 crowded scenes (>= {res['crowded', 'gts']} GTs, paired fraction >= {res['crowded', 'paired']:.2f}, "
                f"mean IoU>0.5 fraction {res['crowded', 'crowd_frac']:.2f}): "
                f"crowd recall DG {res['crowded', 'dg', 'crowd']:.3f} vs vanilla@0.5 {res['crowded', 'v05', 'crowd']:.3f}; "
                f"sparse FP DG {res['sparse', 'dg', 'fp']:.1f} vs vanilla@0.8 {res['sparse', 'v08', 'fp']:.1f}; "
                f"jitter 0.02: recall {tight['crowded', 'dg', 'crowd']:.3f} vs {tight['crowded', 'v05', 'crowd']:.3f}, "
                f"FP {tight['sparse', 'dg', 'fp']:.1f} vs {tight['sparse', 'v08', 'fp']:.1f}; {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_7_metrics(emit):
    col = np.array([[30.0 * i, 0.0, 30.0 * i + 10, 30.0] for i in range(10)])
    far = np.array([[1000.0 + 40 * k, 1000.0, 1010.0 + 40 * k, 1030.0] for k in range(3)])
    errs = {}
    dets = np.vstack([col[0], col[1], far[0], col[2]])
    errs["ap"] = abs(ap50(dets, [0.9, 0.8, 0.7, 0.6], col[:3]) - (1 / 3 + 1 / 3 + 0.75 / 3))
    dets = np.vstack([col[0], far[0], col[1], far[1], far[2]])
    scores = [0.9, 0.8, 0.7, 0.6, 0.5]
    errs["mr"] = abs(log_average_miss_rate(dets, scores, col[:4]) - math.exp((8 * math.log(0.75) + math.log(0.5)) / 9))
    errs["mr_perfect"] = abs(log_average_miss_rate(col[:4], scores[:4], col[:4]) - 1e-10)
    errs["mr_empty"] = abs(log_average_miss_rate(np.zeros((0, 4)), np.zeros(0), col[:4]) - 1.0)
    ji = jaccard_index(np.vstack([col[:7], far[:1]]), np.linspace(1, 0.3, 8), col)
    errs["ji"] = abs(ji - 7 / 11)
    worst = max(errs.values())
    ok = worst <= 1e-9
    emit(7, ok, f"AP/MR/JI fixtures worst error {worst:.1e} (tol 1e-9); JI 7-match example = {ji:.6f} (7/11)")
    assert ok


@pytest.mark.slow
def test_criterion_8_performance(emit):
    cfg = ExperimentConfig().with_overrides({"scene.num_gts": 50})
    grid = make_grid(cfg)
    scene = generate_scene(cfg.scene, 0)
    problem, _, _ = build_problem(cfg, scene, grid, simulate_predictions(scene, grid, seed=0))
    t = time.perf_counter()
    plan = solve_uot(problem)
    pipeline_solve = time.perf_counter() - t
    # dense worst case: every pair a candidate, small epsilon
    rng = np.random.default_rng(0)
    dense = TransportProblem(rng.uniform(0, 5, size=(50, grid.size)), np.full(grid.size, 50 / grid.size), epsilon=0.1)
    t = time.perf_counter()
    solve_uot(dense)
    dense_solve = time.perf_counter() - t

    t = time.perf_counter()
    text = run_sweep(ExperimentConfig(num_scenes=100), "th_pos/th_neg", ["0.7/0.7", "0.8/0.8", "0.9/0.9", "0.7/0.8"])
    sweep = time.perf_counter() - t
    rows = list(csv.DictReader(io.StringIO(text)))
    ok = (problem.shape == (50, 5456) and plan.converged and pipeline_solve < 1 and dense_solve < 1
          and sweep < 300 and len(rows) == 4 and all(r["runs"] == "100" for r in rows))
    emit(8, ok, f"50x5456 solve {pipeline_solve:.3f}s (pipeline cost), {dense_solve:.3f}s (dense, eps 0.1), "
                f"both < 1s; 4-value sweep over 100 scenes each {sweep:.1f}s (< 300s)")
    assert ok


def _cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "dgdet.cli", *args], cwd=cwd, capture_output=True)
    return proc.returncode, proc.stdout


@pytest.mark.slow
def test_criterion_9_cli_determinism(emit, tmp_path):
    commands = lambda d: [  # noqa: E731
        ["simulate", "--seed", "3", "--num-scenes", "2", "--out", f"{d}/scenes.json"],
        ["assign", "--scenes", f"{d}/scenes.json", "--out", f"{d}/assign"],
        ["nms", "--detections", f"{d}/assign/detections_seed_3.jsonl", f"{d}/assign/detections_seed_4.jsonl",
         "--out", f"{d}/kept.jsonl"],
        ["evaluate", "--scenes", f"{d}/scenes.json", "--detections", f"{d}/kept.jsonl", "--out", f"{d}/eval"],
        ["pipeline", "--seed", "3", "--num-scenes", "2", "--out", f"{d}/run"],
        ["sweep", "--seed", "3", "--num-scenes", "2", "--axis", "nms_variant", "--values", "square", "linear",
         "sqrt", "--out", f"{d}/sweep.csv"],
    ]
    outputs = {}
    for tag in ("first", "second"):
        (tmp_path / tag).mkdir()
        stdout = []
        for cmd in commands(tag):
            code, out = _cli(cmd, tmp_path)
            assert code == 0, cmd
            stdout.append(out.replace(tag.encode(), b"RUN"))
        files = {str(p.relative_to(tmp_path / tag)): p.read_bytes()
                 for p in sorted((tmp_path / tag).rglob("*")) if p.is_file()}
        outputs[tag] = (stdout, files)
    same_files = outputs["first"][1] == outputs["second"][1]
    same_stdout = outputs["first"][0] == outputs["second"][0]
    ok = same_files and same_stdout
    emit(9, ok, f"6 subcommands run twice: {len(outputs['first'][1])} files byte-identical={same_files}, "
                f"stdout identical={same_stdout}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
