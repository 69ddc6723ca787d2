"""Detection metrics: AP at IoU 0.5, log-average miss rate, Jaccard index.

All metrics accept either a single image (arrays) or a list of per-image
arrays. Detections are matched greedily in descending score order, each to
the unmatched GT it overlaps most (IoU >= 0.5).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from dgdet.geometry import as_array, pairwise_iou

MR_REFERENCE = np.logspace(-2.0, 0.0, 9)
EVAL_SCHEMA = "dgdet.eval/1"


class UndefinedMetricError(ValueError):
    pass


@dataclass
class Matching:
    order: np.ndarray  # detection indices, descending score
    det_to_gt: np.ndarray  # per detection (original index), -1 for FP
    gt_to_det: np.ndarray

    @property
    def num_matches(self) -> int:
        return int((self.det_to_gt >= 0).sum())


def match_detections(det_boxes, det_scores, gt_boxes, iou_thr: float = 0.5) -> Matching:
    dets = as_array(det_boxes)
    gts = as_array(gt_boxes)
    scores = np.asarray(det_scores, dtype=float)
    order = np.lexsort((np.arange(scores.size), -scores))
    det_to_gt = np.full(len(dets), -1)
    gt_to_det = np.full(len(gts), -1)
    if len(dets) == 0 or len(gts) == 0:
        return Matching(order, det_to_gt, gt_to_det)
    ious = pairwise_iou(dets, gts)
    for d in order:
        cand = np.where(gt_to_det < 0, ious[d], -1.0)
        g = int(np.argmax(cand))
        if cand[g] >= iou_thr:
            det_to_gt[d] = g
            gt_to_det[g] = d
    return Matching(order, det_to_gt, gt_to_det)


def optimal_match_count(det_boxes, gt_boxes, iou_thr: float = 0.5) -> int:
    """Maximum one-to-one matching size at the IoU threshold (bipartite)."""
    dets, gts = as_array(det_boxes), as_array(gt_boxes)
    if len(dets) == 0 or len(gts) == 0:
        return 0
    ok = pairwise_iou(dets, gts) >= iou_thr
    rows, cols = linear_sum_assignment(-ok.astype(float))
    return int(ok[rows, cols].sum())


def _as_images(det_boxes, det_scores, gt_boxes):
    # a list of per-image score arrays means multi-image input
    if isinstance(det_scores, (list, tuple)) and det_scores and np.ndim(det_scores[0]) == 1:
        if not len(det_boxes) == len(det_scores) == len(gt_boxes):
            raise ValueError("per-image lists must have equal lengths")
        return list(zip(det_boxes, det_scores, gt_boxes))
    return [(det_boxes, det_scores, gt_boxes)]


def _pooled(images, iou_thr):
    scores, tps, n_gt = [], [], 0
    for boxes, sc, gts in images:
        gts = as_array(gts)
        n_gt += len(gts)
        m = match_detections(boxes, sc, gts, iou_thr)
        scores.append(np.asarray(sc, dtype=float))
        tps.append(m.det_to_gt >= 0)
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0, dtype=bool)
    order = np.lexsort((np.arange(scores.size), -scores))
    return scores[order], tps[order], n_gt


def pr_curve(det_boxes, det_scores, gt_boxes, iou_thr: float = 0.5):
    _, tp, n_gt = _pooled(_as_images(det_boxes, det_scores, gt_boxes), iou_thr)
    if n_gt == 0:
        raise UndefinedMetricError("precision/recall undefined without ground truth")
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall


def ap50(det_boxes, det_scores, gt_boxes, iou_thr: float = 0.5) -> float:
    """All-point interpolated average precision."""
    precision, recall = pr_curve(det_boxes, det_scores, gt_boxes, iou_thr)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def log_average_miss_rate(det_boxes, det_scores, gt_boxes, image_count: int | None = None,
                          iou_thr: float = 0.5) -> float:
    """Miss rate averaged in log space at 9 FPPI points in [1e-2, 1] (MR^-2).

    At each reference FPPI the miss rate of the longest score-ranked prefix
    whose FPPI does not exceed the reference is used; 1.0 if no prefix does.
    """
    images = _as_images(det_boxes, det_scores, gt_boxes)
    if image_count is None:
        image_count = len(images)
    if image_count < 1:
        raise ValueError("image_count must be >= 1")
    _, tp, n_gt = _pooled(images, iou_thr)
    if n_gt == 0:
        raise UndefinedMetricError("miss rate undefined without ground truth")
    fppi = np.concatenate([[0.0], np.cumsum(~tp) / image_count])
    miss = np.concatenate([[1.0], 1.0 - np.cumsum(tp) / n_gt])
    samples = np.empty(MR_REFERENCE.size)
    for k, ref in enumerate(MR_REFERENCE):
        ok = np.flatnonzero(fppi <= ref)
        samples[k] = miss[ok[-1]]
    return float(np.exp(np.mean(np.log(np.maximum(samples, 1e-10)))))


def jaccard_index(det_boxes, det_scores, gt_boxes, iou_thr: float = 0.5, optimal: bool = False) -> float:
    """``matches / (dets + gts - matches)`` for one image; 1.0 when both are empty."""
    dets, gts = as_array(det_boxes), as_array(gt_boxes)
    if len(dets) == 0 and len(gts) == 0:
        return 1.0
    if optimal:
        k = optimal_match_count(dets, gts, iou_thr)
    else:
        k = match_detections(dets, det_scores, gts, iou_thr).num_matches
    return k / (len(dets) + len(gts) - k)


def best_jaccard_index(det_boxes, det_scores, gt_boxes, thresholds=None, iou_thr: float = 0.5,
                       per_image: bool = True, optimal: bool = False) -> tuple[float, float]:
    """Sweep score thresholds; return ``(best JI, threshold)``.

    ``per_image=True`` averages JI over images; otherwise matches and counts
    are pooled over the dataset before forming the ratio.
    """
    images = _as_images(det_boxes, det_scores, gt_boxes)
    if thresholds is None:
        thresholds = np.round(np.arange(0.0, 1.0, 0.05), 2)
    best = (-1.0, 0.0)
    for t in thresholds:
        if per_image:
            vals = []
            for boxes, sc, gts in images:
                sc = np.asarray(sc, dtype=float)
                keep = sc >= t
                vals.append(jaccard_index(as_array(boxes)[keep], sc[keep], gts, iou_thr, optimal))
            ji = float(np.mean(vals))
        else:
            k = nd = ng = 0
            for boxes, sc, gts in images:
                sc = np.asarray(sc, dtype=float)
                keep = sc >= t
                b = as_array(boxes)[keep]
                g = as_array(gts)
                nd += len(b)
                ng += len(g)
                if optimal:
                    k += optimal_match_count(b, g, iou_thr)
                else:
                    k += match_detections(b, sc[keep], g, iou_thr).num_matches
            ji = 1.0 if nd + ng == 0 else k / (nd + ng - k)
        if ji > best[0]:
            best = (ji, float(t))
    return best


def subset_recall(det_boxes, det_scores, gt_boxes, subset_masks, iou_thr: float = 0.5) -> float:
    """Recall restricted to GTs flagged in ``subset_masks``; NaN if none are flagged."""
    images = _as_images(det_boxes, det_scores, gt_boxes)
    if len(images) == 1 and not isinstance(subset_masks, list):
        subset_masks = [subset_masks]
    hit = total = 0
    for (boxes, sc, gts), mask in zip(images, subset_masks):
        mask = np.asarray(mask, dtype=bool)
        m = match_detections(boxes, sc, gts, iou_thr)
        hit += int(((m.gt_to_det >= 0) & mask).sum())
        total += int(mask.sum())
    return hit / total if total else float("nan")


@dataclass
class EvalReport:
    ap50: float
    mr: float
    ji: float
    ji_threshold: float
    recall: float
    recall_sparse: float
    recall_crowd: float
    true_positives: int
    false_positives: int
    num_detections: int
    num_gts: int
    num_images: int

    def to_dict(self) -> dict:
        # NaN (empty GT subset) becomes null in JSON
        return {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps({"schema": EVAL_SCHEMA, **self.to_dict()}, indent=1, sort_keys=True) + "\n"

    @staticmethod
    def csv_header() -> list[str]:
        return list(EvalReport.__dataclass_fields__)

    def csv_row(self) -> list:
        return [getattr(self, k) for k in self.csv_header()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def evaluate(det_boxes, det_scores, gt_boxes, crowd_masks, iou_thr: float = 0.5,
             per_image_ji: bool = True) -> EvalReport:
    """Full report over a list of images (``crowd_masks`` flags crowd GTs per image)."""
    images = _as_images(det_boxes, det_scores, gt_boxes)
    if len(images) == 1 and not isinstance(crowd_masks, list):
        crowd_masks = [crowd_masks]
    boxes = [b for b, _, _ in images]
    scores = [s for _, s, _ in images]
    gts = [g for _, _, g in images]
    _, tp, n_gt = _pooled(images, iou_thr)
    ji, ji_t = best_jaccard_index(boxes, scores, gts, iou_thr=iou_thr, per_image=per_image_ji)
    crowd = [np.asarray(m, dtype=bool) for m in crowd_masks]
    return EvalReport(
        ap50=ap50(boxes, scores, gts, iou_thr),
        mr=log_average_miss_rate(boxes, scores, gts, len(images), iou_thr),
        ji=ji,
        ji_threshold=ji_t,
        recall=float(tp.sum() / n_gt),
        recall_sparse=subset_recall(boxes, scores, gts, [~m for m in crowd], iou_thr),
        recall_crowd=subset_recall(boxes, scores, gts, crowd, iou_thr),
        true_positives=int(tp.sum()),
        false_positives=int((~tp).sum()),
        num_detections=int(tp.size),
        num_gts=int(n_gt),
        num_images=len(images),
    )
