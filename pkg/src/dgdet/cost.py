"""Transport cost between GTs and anchors.

The overlap-aware cost scores an anchor's regressed box by how well it covers
its own GT and how clearly it avoids every other GT; neighbours that overlap
the target GT themselves are penalised less. A level cost keeps GTs near their
preferred pyramid levels, and candidate priors restrict which (GT, anchor)
pairs take part in the transport at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from dgdet.geometry import BBox, as_array, box_centers, pairwise_iou
from dgdet.uot import SENTINEL_COST, DimensionError

BCE_CLAMP = 1e-7

# size-of-interest per pyramid level, on sqrt(w*h) of the GT box
DEFAULT_SOI = {3: (0.0, 64.0), 4: (64.0, 128.0), 5: (128.0, 256.0), 6: (256.0, 512.0), 7: (512.0, float("inf"))}


class ConfigurationError(ValueError):
    pass


@dataclass
class LevelSpec:
    anchor_level: np.ndarray
    soi_table: Mapping[int, tuple[float, float]]

    def __post_init__(self):
        self.anchor_level = np.asarray(self.anchor_level, dtype=int)
        levels = sorted(self.soi_table)
        if levels != list(range(levels[0], levels[0] + len(levels))):
            raise ConfigurationError(f"SoI levels must be contiguous integers, got {levels}")
        prev_hi = -np.inf
        for lvl in levels:
            lo, hi = self.soi_table[lvl]
            if not lo < hi or lo < prev_hi:
                raise ConfigurationError(f"SoI ranges must be ordered and non-overlapping (level {lvl})")
            prev_hi = hi


@dataclass
class CandidateMask:
    mask: np.ndarray

    @property
    def empty_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.mask.any(axis=1))

    @property
    def degenerate(self) -> bool:
        return self.mask.shape[0] == 0 or self.empty_rows.size > 0

    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def bce_to_one(phi: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(phi, BCE_CLAMP))


def bce_to_zero(phi: np.ndarray) -> np.ndarray:
    return -np.log(np.maximum(1.0 - phi, BCE_CLAMP))


def overlap_aware_cost_from_iou(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Overlap-aware cost from IoU matrices.

    ``phi[k, j]`` is the IoU of GT k with predicted box j and ``psi[i, k]`` the
    IoU between GTs. For pair (i, j)::

        C[i, j] = (1 - phi[i, j]) * (bce(phi[i, j], 1)
                                    + sum_{k != i} (1 - psi[i, k]) * bce(phi[k, j], 0))
    """
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    m = phi.shape[0]
    if psi.shape != (m, m):
        raise DimensionError(f"psi must be {m}x{m}, got {psi.shape}")
    neighbour = 1.0 - psi
    np.fill_diagonal(neighbour, 0.0)
    foreign = neighbour @ bce_to_zero(phi)
    return (1.0 - phi) * (bce_to_one(phi) + foreign)


def overlap_aware_cost(gt: Sequence[BBox] | np.ndarray, pred: Sequence[BBox] | np.ndarray) -> np.ndarray:
    gt = as_array(gt)
    return overlap_aware_cost_from_iou(pairwise_iou(gt, pred), pairwise_iou(gt, gt))


def iou_cost(gt, pred) -> np.ndarray:
    """Plain IoU-loss cost ``1 - phi``; the baseline the overlap-aware cost replaces."""
    return 1.0 - pairwise_iou(gt, pred)


def score_cost(scores: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Per-anchor focal loss of the predicted score against a positive target."""
    p = np.clip(np.asarray(scores, dtype=float), BCE_CLAMP, 1.0)
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def preferred_levels(
    gt: BBox,
    soi_table: Mapping[int, tuple[float, float]] = DEFAULT_SOI,
    band: float = 0.25,
) -> tuple[int, ...]:
    """One or two preferred levels for a GT, by ``sqrt(w*h)``.

    A neighbouring level is added when the scale lies within ``band`` (relative)
    of the shared range edge. Out-of-range scales clamp to the end levels.
    """
    scale = np.sqrt(gt.area)
    levels = sorted(soi_table)
    lowest, highest = levels[0], levels[-1]
    if scale < soi_table[lowest][0]:
        return (lowest,)
    if scale >= soi_table[highest][1]:
        return (highest,)
    home = next(lvl for lvl in levels if soi_table[lvl][0] <= scale < soi_table[lvl][1])
    lo, hi = soi_table[home]
    out = [home]
    if home > lowest and lo > 0 and scale <= lo * (1.0 + band):
        out.insert(0, home - 1)
    if home < highest and np.isfinite(hi) and scale >= hi / (1.0 + band):
        out.append(home + 1)
    return tuple(out)


def level_cost(gt_levels: Sequence[Sequence[int]], anchors: LevelSpec | np.ndarray) -> np.ndarray:
    anchor_level = anchors.anchor_level if isinstance(anchors, LevelSpec) else np.asarray(anchors, dtype=int)
    out = np.empty((len(gt_levels), anchor_level.size))
    for i, pref in enumerate(gt_levels):
        if len(pref) == 0:
            raise ConfigurationError(f"GT {i} has no preferred level")
        pref = np.asarray(pref, dtype=int)
        out[i] = np.abs(pref[:, None] - anchor_level[None, :]).min(axis=0)
    return out


def combine_costs(c_iou: np.ndarray, c_level: np.ndarray | None = None, gamma: float = 2.0) -> np.ndarray:
    c_iou = np.asarray(c_iou, dtype=float)
    if c_level is None:
        return gamma * c_iou
    c_level = np.asarray(c_level, dtype=float)
    if c_iou.shape != c_level.shape:
        raise DimensionError(f"cost shapes differ: {c_iou.shape} vs {c_level.shape}")
    return gamma * c_iou + c_level


def apply_candidates(cost: np.ndarray, candidates: CandidateMask | np.ndarray) -> np.ndarray:
    mask = candidates.mask if isinstance(candidates, CandidateMask) else np.asarray(candidates, dtype=bool)
    return np.where(mask, cost, SENTINEL_COST)


def center_prior_candidates(gt, grid, r: int = 5) -> CandidateMask:
    """Per GT and per level, the ``r**2`` anchors closest to the GT centre.

    ``grid`` needs ``centers`` (n, 2) and ``levels`` (n,) arrays.
    """
    if r < 1:
        raise ConfigurationError("center prior radius must be >= 1")
    centers = np.asarray(grid.centers, dtype=float)
    levels = np.asarray(grid.levels, dtype=int)
    gt_centers = box_centers(as_array(gt))
    k = r * r
    mask = np.zeros((len(gt_centers), len(centers)), dtype=bool)
    d2 = ((gt_centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    for lvl in np.unique(levels):
        idx = np.flatnonzero(levels == lvl)
        if idx.size <= k:
            mask[:, idx] = True
            continue
        order = np.argsort(d2[:, idx], axis=1, kind="stable")[:, :k]
        rows = np.repeat(np.arange(len(gt_centers)), k)
        mask[rows, idx[order.ravel()]] = True
    return CandidateMask(mask)


def iou_threshold_candidates(gt, anchor_boxes, threshold: float = 0.5) -> CandidateMask:
    if not 0.0 <= threshold < 1.0:
        raise ConfigurationError("IoU threshold must lie in [0, 1)")
    return CandidateMask(pairwise_iou(gt, anchor_boxes) > threshold)
