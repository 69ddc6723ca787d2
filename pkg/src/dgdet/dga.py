"""Decode anchor labels and weights from a transport plan, and evaluate losses.

Each row of the plan is one GT's density over anchors. The head of that
distribution (by cumulative mass) becomes positive, the tail negative, the
band in between is ignored. When several GTs claim the same anchor the one
with the largest entry in that column wins. Positive weights are densities
normalised by the GT's strongest positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dgdet.geometry import as_array, elementwise_giou
from dgdet.uot import DimensionError, TransportPlan, TransportProblem, uot_objective

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

STRATEGIES = ("dyn_k_star", "dyn_k", "fix_k")
LABEL_NAMES = {POSITIVE: "positive", NEGATIVE: "negative", IGNORE: "ignore"}


@dataclass
class AssignmentResult:
    labels: np.ndarray
    matched_gt: np.ndarray
    weights: np.ndarray
    gts_without_positives: list[int] = field(default_factory=list)

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    @property
    def ignored(self) -> np.ndarray:
        return np.flatnonzero(self.labels == IGNORE)

    def positives_of(self, gt: int) -> np.ndarray:
        return np.flatnonzero((self.labels == POSITIVE) & (self.matched_gt == gt))

    def to_records(self, levels: np.ndarray | None = None, only_labelled: bool = True) -> list[dict]:
        """JSON-ready rows; by default negatives are omitted to keep dumps small."""
        rows = []
        for j, lab in enumerate(self.labels):
            if only_labelled and lab == NEGATIVE:
                continue
            rows.append({
                "anchor": j,
                "level": None if levels is None else int(levels[j]),
                "label": LABEL_NAMES[int(lab)],
                "matched_gt": int(self.matched_gt[j]) if lab == POSITIVE else None,
                "weight": float(self.weights[j]) if lab == POSITIVE else None,
            })
        return rows


@dataclass
class DensityMap:
    values: np.ndarray
    levels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("densities must be finite and nonnegative")

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def level_grid(self, level: int) -> np.ndarray:
        sel = self.levels == level
        grid = np.zeros((self.rows[sel].max() + 1, self.cols[sel].max() + 1))
        grid[self.rows[sel], self.cols[sel]] = self.values[sel]
        return grid


def _plan_matrix(plan) -> np.ndarray:
    return plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)


def _row_labels_dyn_k_star(row: np.ndarray, th_pos: float, th_neg: float) -> np.ndarray:
    labels = np.full(row.size, NEGATIVE, dtype=np.int8)
    total = row.sum()
    if total <= 0:
        return labels
    order = np.argsort(-row, kind="stable")
    frac = np.cumsum(row[order]) / total
    ranked = np.full(row.size, NEGATIVE, dtype=np.int8)
    ranked[frac <= th_neg] = IGNORE
    ranked[frac <= th_pos] = POSITIVE
    ranked[0] = POSITIVE  # the head anchor is always kept
    ranked[row[order] <= 0] = NEGATIVE
    labels[order] = ranked
    return labels


def _row_labels_top_k(row: np.ndarray, k: int) -> np.ndarray:
    labels = np.full(row.size, NEGATIVE, dtype=np.int8)
    order = np.argsort(-row, kind="stable")[:k]
    order = order[row[order] > 0]
    labels[order] = POSITIVE
    return labels


def dynamic_k(iou: np.ndarray, top: int = 20) -> np.ndarray:
    """Positives per GT as the rounded sum of its ``top`` largest IoUs (at least 1)."""
    iou = np.asarray(iou, dtype=float)
    top = min(top, iou.shape[1])
    best = -np.sort(-iou, axis=1)[:, :top]
    return np.maximum(np.rint(best.sum(axis=1)).astype(int), 1)


def row_labels(
    pi: np.ndarray,
    th_pos: float = 0.7,
    th_neg: float = 0.8,
    strategy: str = "dyn_k_star",
    k: int = 10,
    iou: np.ndarray | None = None,
) -> np.ndarray:
    """Per-GT labels before column competition, shape (m, n)."""
    if strategy == "dyn_k_star":
        if not 0 < th_pos <= th_neg <= 1:
            raise ValueError(f"need 0 < th_pos <= th_neg <= 1, got {th_pos}, {th_neg}")
        return np.stack([_row_labels_dyn_k_star(r, th_pos, th_neg) for r in pi])
    if strategy == "fix_k":
        return np.stack([_row_labels_top_k(r, k) for r in pi])
    if strategy == "dyn_k":
        if iou is None:
            raise ValueError("dyn_k needs the GT/prediction IoU matrix")
        ks = dynamic_k(iou)
        return np.stack([_row_labels_top_k(r, kk) for r, kk in zip(pi, ks)])
    raise ValueError(f"unknown assignment strategy {strategy!r}; choose from {STRATEGIES}")


def decode_assignment(
    plan: TransportPlan | np.ndarray,
    th_pos: float = 0.7,
    th_neg: float = 0.8,
    strategy: str = "dyn_k_star",
    k: int = 10,
    iou: np.ndarray | None = None,
    with_weights: bool = True,
) -> AssignmentResult:
    pi = _plan_matrix(plan)
    m, n = pi.shape
    per_gt = row_labels(pi, th_pos, th_neg, strategy, k, iou)

    claims = per_gt == POSITIVE
    contested = np.where(claims, pi, -np.inf)
    winner = np.argmax(contested, axis=0)
    has_claim = claims.any(axis=0)

    labels = np.full(n, NEGATIVE, dtype=np.int8)
    labels[(per_gt == IGNORE).any(axis=0)] = IGNORE
    labels[has_claim] = POSITIVE
    matched = np.where(has_claim, winner, -1)

    missing = [i for i in range(m) if not np.any(matched == i)]
    result = AssignmentResult(labels, matched, np.zeros(n), missing)
    return compute_weights(pi, result) if with_weights else result


def compute_weights(plan: TransportPlan | np.ndarray, assignment: AssignmentResult) -> AssignmentResult:
    pi = _plan_matrix(plan)
    weights = np.zeros(assignment.labels.size)
    for i in range(pi.shape[0]):
        pos = assignment.positives_of(i)
        if pos.size == 0:
            continue
        d = pi[i, pos]
        weights[pos] = d / d.max()
    return AssignmentResult(assignment.labels, assignment.matched_gt, weights, list(assignment.gts_without_positives))


def focal_loss(p: np.ndarray, target: np.ndarray | float, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Elementwise binary focal loss with the log clamped away from zero."""
    p = np.clip(np.asarray(p, dtype=float), 1e-7, 1.0 - 1e-12)
    target = np.broadcast_to(np.asarray(target, dtype=float), p.shape)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    return np.where(target > 0.5, pos, neg)


@dataclass
class UOTLossTerms:
    transport: float
    object_wise: float
    anchor_wise: float
    total: float

    def as_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def uot_loss(
    plan: TransportPlan,
    problem: TransportProblem,
    transport_term: str = "entropic",
    use_object_wise: bool = True,
    use_anchor_wise: bool = True,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> UOTLossTerms:
    """Transport term + focal object-wise term + L2 anchor-wise term.

    ``transport_term="entropic"`` uses the full regularised objective at the
    plan; ``"plain"`` uses only the inner product ``<C, pi>``.
    """
    pi = plan.pi
    if pi.shape != problem.shape:
        raise DimensionError(f"plan shape {pi.shape} != problem shape {problem.shape}")
    if transport_term == "entropic":
        transport = uot_objective(pi, problem)
    elif transport_term == "plain":
        transport = float(np.sum(problem.C * pi))
    else:
        raise ValueError(f"unknown transport term {transport_term!r}")
    a_hat = pi.sum(axis=1)
    b_hat = pi.sum(axis=0)
    # a_hat is read as the confidence that each GT is fully transported
    d1 = float(focal_loss(np.minimum(a_hat, 1.0), 1.0, alpha, gamma).sum()) if use_object_wise else 0.0
    d2 = float(np.linalg.norm(b_hat - problem.b)) if use_anchor_wise else 0.0
    return UOTLossTerms(transport, d1, d2, transport + d1 + d2)


@dataclass
class DetectionLoss:
    cls: float
    loc: float
    uot: float
    total: float
    normalizer: float
    no_positives: bool = False

    def as_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in self.__dict__.items()}


def detection_loss(
    assignment: AssignmentResult,
    scores: np.ndarray,
    pred_boxes,
    gts,
    uot: float | UOTLossTerms = 0.0,
    gamma1: float = 2.0,
    gamma2: float = 0.25,
    normalizer: str = "pos_plus_neg",
    alpha: float = 0.25,
    focal_gamma: float = 2.0,
) -> DetectionLoss:
    """Density-weighted classification (focal) and localisation (GIoU) losses.

    ``normalizer="pos_plus_neg"`` divides by the positive weights plus the
    negative count (negatives weigh 1); ``"pos"`` by the positive weights only.
    """
    scores = np.asarray(scores, dtype=float)
    pred = as_array(pred_boxes)
    gt = as_array(gts)
    n = assignment.labels.size
    if scores.shape != (n,) or len(pred) != n:
        raise DimensionError("scores, boxes and assignment must share the anchor index")
    pos = assignment.positives
    neg = assignment.negatives
    w = assignment.weights[pos]

    fl_pos = focal_loss(scores[pos], 1.0, alpha, focal_gamma)
    fl_neg = focal_loss(scores[neg], 0.0, alpha, focal_gamma)
    if normalizer == "pos_plus_neg":
        norm = float(w.sum() + neg.size)
    elif normalizer == "pos":
        norm = float(w.sum())
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    if norm <= 0:
        norm = 1.0

    cls = float((np.dot(w, fl_pos) + fl_neg.sum()) / norm)
    if pos.size:
        giou_loss = 1.0 - elementwise_giou(pred[pos], gt[assignment.matched_gt[pos]])
        loc = float(np.dot(w, giou_loss) / norm)
    else:
        loc = 0.0
    uot_value = uot.total if isinstance(uot, UOTLossTerms) else float(uot)
    total = cls + gamma1 * loc + gamma2 * uot_value
    return DetectionLoss(cls, loc, uot_value, total, norm, pos.size == 0)


def dump_assignment(path, assignment: AssignmentResult, levels: np.ndarray | None = None, extra: dict | None = None) -> None:
    doc = {
        "schema": "dgdet.assignment/1",
        "num_anchors": int(assignment.labels.size),
        "num_positive": int(assignment.positives.size),
        "num_ignore": int(assignment.ignored.size),
        "gts_without_positives": [int(i) for i in assignment.gts_without_positives],
        "records": assignment.to_records(levels),
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_assignment(path) -> tuple[AssignmentResult, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    n = doc["num_anchors"]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1)
    weights = np.zeros(n)
    by_name = {v: k for k, v in LABEL_NAMES.items()}
    for rec in doc["records"]:
        j = rec["anchor"]
        labels[j] = by_name[rec["label"]]
        if rec["label"] == "positive":
            matched[j] = rec["matched_gt"]
            weights[j] = rec["weight"]
    return AssignmentResult(labels, matched, weights, doc["gts_without_positives"]), doc


def assignment_summary(assignments: Sequence[AssignmentResult]) -> dict:
    pos = [a.positives.size for a in assignments]
    ign = [a.ignored.size for a in assignments]
    return {"mean_positives": float(np.mean(pos)), "mean_ignored": float(np.mean(ign))}
