"""Axis-aligned boxes and the IoU / GIoU primitives.

Boxes are (x1, y1, x2, y2) in pixels. The scalar functions work on
:class:`BBox` values; the ``pairwise_*`` functions work on ``(N, 4)`` arrays
and are what the cost and NMS code calls in its inner loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box (need x1<x2, y1<y2): {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def as_array(boxes: Iterable[BBox] | np.ndarray) -> np.ndarray:
    """Stack boxes into an ``(N, 4)`` float array (arrays pass through)."""
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=float)
        return arr.reshape(-1, 4)
    rows = [b.as_tuple() for b in boxes]
    return np.asarray(rows, dtype=float).reshape(-1, 4)


def to_boxes(arr: np.ndarray) -> list[BBox]:
    return [BBox(*map(float, row)) for row in np.asarray(arr, dtype=float).reshape(-1, 4)]


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    hull = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (hull - union) / hull


def areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pairwise_iou(A: Sequence[BBox] | np.ndarray, B: Sequence[BBox] | np.ndarray) -> np.ndarray:
    """IoU matrix of shape ``(len(A), len(B))``."""
    a = as_array(A)
    b = as_array(B)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputError("pairwise_iou needs two nonempty box sets")
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    return inter / union


def pairwise_giou(A: Sequence[BBox] | np.ndarray, B: Sequence[BBox] | np.ndarray) -> np.ndarray:
    a = as_array(A)
    b = as_array(B)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputError("pairwise_giou needs two nonempty box sets")
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    hlt = np.minimum(a[:, None, :2], b[None, :, :2])
    hrb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hwh = hrb - hlt
    hull = hwh[..., 0] * hwh[..., 1]
    return inter / union - (hull - union) / hull


def elementwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of aligned box rows ``a[k]`` vs ``b[k]``."""
    a = as_array(a)
    b = as_array(b)
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    return inter / (areas(a) + areas(b) - inter)


def elementwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU of aligned box rows ``a[k]`` vs ``b[k]``."""
    a = as_array(a)
    b = as_array(b)
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = areas(a) + areas(b) - inter
    hwh = np.maximum(a[:, 2:], b[:, 2:]) - np.minimum(a[:, :2], b[:, :2])
    hull = hwh[:, 0] * hwh[:, 1]
    return inter / union - (hull - union) / hull


def box_centers(boxes: np.ndarray) -> np.ndarray:
    boxes = as_array(boxes)
    return 0.5 * (boxes[:, :2] + boxes[:, 2:])
