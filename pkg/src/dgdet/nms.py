"""Density-guided NMS and the fixed-threshold baseline.

Every proposal carries a density. Its suppression threshold is
``0.5 + 0.3 * f(s(d))`` where ``s`` min-max scales densities over the image's
initial proposal set and ``f`` is one of square / linear / sqrt. After each
kept box, surviving boxes have their density decayed by
``exp(-IoU**2 / sigma)``, so a crowd that has been thinned out is treated as
less crowded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dgdet.geometry import BBox, as_array, pairwise_iou

VARIANTS = ("square", "linear", "sqrt")
T_LOW = 0.5
T_SPAN = 0.3
DETECTIONS_SCHEMA = "dgdet.detections/1"


class EmptySetError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    density: float = 0.0
    anchor: int | None = None
    image: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.score) or not np.isfinite(self.density):
            raise ValueError("score and density must be finite")
        if self.density < 0:
            raise ValueError("density must be nonnegative")

    def to_record(self) -> dict:
        rec = {"box": list(self.box.as_tuple()), "score": self.score, "density": self.density}
        if self.anchor is not None:
            rec["anchor"] = self.anchor
        if self.image is not None:
            rec["image"] = self.image
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(BBox(*rec["box"]), float(rec["score"]), float(rec.get("density", 0.0)),
                   rec.get("anchor"), rec.get("image"))


@dataclass(frozen=True)
class DensityScaler:
    d_min: float
    d_max: float
    variant: str = "linear"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown scaling variant {self.variant!r}; choose from {VARIANTS}")
        if self.d_min > self.d_max:
            raise ValueError("d_min must not exceed d_max")

    def scale(self, d):
        d = np.asarray(d, dtype=float)
        if self.d_max == self.d_min:
            return np.zeros_like(d)
        return np.clip((d - self.d_min) / (self.d_max - self.d_min), 0.0, 1.0)

    def f(self, d):
        s = self.scale(d)
        if self.variant == "square":
            return s * s
        if self.variant == "sqrt":
            return np.sqrt(s)
        return s


def build_scaler(detections_or_densities, variant: str = "linear") -> DensityScaler:
    dens = _densities(detections_or_densities)
    if dens.size == 0:
        raise EmptySetError("cannot build a density scaler from an empty set")
    return DensityScaler(float(dens.min()), float(dens.max()), variant)


def _densities(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.astype(float).ravel()
    items = list(items)
    if items and isinstance(items[0], Detection):
        return np.array([d.density for d in items], dtype=float)
    return np.asarray(items, dtype=float)


def adaptive_threshold(d, scaler: DensityScaler):
    t = T_LOW + T_SPAN * scaler.f(d)
    return float(t) if np.ndim(t) == 0 else t


def decay_factor(iou, sigma: float):
    return np.exp(-np.square(iou) / sigma)


def _score_order(scores: np.ndarray) -> np.ndarray:
    # descending score, ties by index
    return np.lexsort((np.arange(scores.size), -scores))


def dg_nms_keep(
    boxes: np.ndarray,
    scores: np.ndarray,
    densities: np.ndarray,
    sigma: float = 0.5,
    variant: str = "linear",
    scaler: DensityScaler | None = None,
    return_densities: bool = False,
):
    """Indices kept by density-guided NMS, in descending score order."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    boxes = as_array(boxes)
    scores = np.asarray(scores, dtype=float)
    d = np.array(densities, dtype=float)
    n = scores.size
    if n == 0:
        empty = np.zeros(0, dtype=int)
        return (empty, d) if return_densities else empty
    if scaler is None:
        scaler = build_scaler(d, variant)
    ious = pairwise_iou(boxes, boxes)
    order = _score_order(scores)
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos, t in enumerate(order):
        if not alive[t]:
            continue
        keep.append(t)
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if rest.size == 0:
            continue
        overlap = ious[t, rest]
        suppressed = overlap > adaptive_threshold(d[rest], scaler)
        alive[rest[suppressed]] = False
        survivors = rest[~suppressed]
        d[survivors] *= decay_factor(overlap[~suppressed], sigma)
    keep = np.asarray(keep, dtype=int)
    return (keep, d) if return_densities else keep


def vanilla_nms_keep(boxes: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("NMS threshold must lie in (0, 1)")
    boxes = as_array(boxes)
    scores = np.asarray(scores, dtype=float)
    order = list(_score_order(scores))
    keep = []
    while order:
        t = order.pop(0)
        keep.append(t)
        if not order:
            break
        rest = np.asarray(order)
        overlap = pairwise_iou(boxes[t:t + 1], boxes[rest])[0]
        order = [int(i) for i in rest[overlap <= threshold]]
    return np.asarray(keep, dtype=int)


def _unpack(detections: Sequence[Detection]):
    boxes = as_array([d.box for d in detections])
    scores = np.array([d.score for d in detections], dtype=float)
    dens = np.array([d.density for d in detections], dtype=float)
    return boxes, scores, dens


def dg_nms(detections: Sequence[Detection], sigma: float = 0.5, variant: str = "linear") -> list[Detection]:
    detections = list(detections)
    if not detections:
        return []
    boxes, scores, dens = _unpack(detections)
    return [detections[i] for i in dg_nms_keep(boxes, scores, dens, sigma, variant)]


def vanilla_nms(detections: Sequence[Detection], threshold: float = 0.5) -> list[Detection]:
    detections = list(detections)
    if not detections:
        return []
    boxes, scores, _ = _unpack(detections)
    return [detections[i] for i in vanilla_nms_keep(boxes, scores, threshold)]


def write_detections(path, detections: Iterable[Detection]) -> None:
    """JSON lines: a schema header, then one detection per line."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": DETECTIONS_SCHEMA}) + "\n")
        for det in detections:
            fh.write(json.dumps(det.to_record(), sort_keys=True) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "schema" in rec:
                if rec["schema"] != DETECTIONS_SCHEMA:
                    raise ValueError(f"unsupported detections schema {rec['schema']!r}")
                continue
            out.append(Detection.from_record(rec))
    return out
