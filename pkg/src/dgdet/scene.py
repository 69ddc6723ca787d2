"""Synthetic crowded scenes standing in for a trained detector.

A scene is a set of pedestrian-shaped GT boxes, some placed as overlapping
pairs. The anchor grid is a multi-level pyramid with one anchor per cell.
Each anchor "predicts" its nearest GT's box with jitter that grows with the
anchor-to-GT distance, so prediction quality falls off away from objects the
way a regression head's does. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from dgdet.dga import DensityMap
from dgdet.geometry import BBox, as_array, box_centers, elementwise_iou, pairwise_iou, to_boxes
from dgdet.uot import TransportPlan

SCENE_SCHEMA = "dgdet.scene/1"
OVERLAP_LEVELS = {"sparse": 0.0, "moderate": 0.25, "crowded": 0.5}
CROWD_IOU = 0.5


class PackingError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    num_gts: int = 20
    image_size: tuple[int, int] = (512, 512)
    height_range: tuple[float, float] = (48.0, 160.0)
    aspect: float = 3.0  # H:W
    overlap: str = "crowded"
    overlap_fraction: float | None = None
    pair_iou_range: tuple[float, float] = (0.3, 0.7)
    free_iou: float = 0.1  # max IoU between GTs not placed as a pair
    max_tries: int = 2000

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.height_range = tuple(float(v) for v in self.height_range)
        self.pair_iou_range = tuple(float(v) for v in self.pair_iou_range)
        if self.num_gts < 1:
            raise ValueError("num_gts must be >= 1")
        if self.overlap not in OVERLAP_LEVELS:
            raise ValueError(f"overlap must be one of {sorted(OVERLAP_LEVELS)}")

    @property
    def fraction(self) -> float:
        return OVERLAP_LEVELS[self.overlap] if self.overlap_fraction is None else self.overlap_fraction


@dataclass
class Scene:
    image_size: tuple[int, int]
    gts: np.ndarray
    seed: int
    partner: np.ndarray = field(default=None)

    def __post_init__(self):
        self.gts = as_array(self.gts)
        if self.partner is None:
            self.partner = np.full(len(self.gts), -1)
        self.partner = np.asarray(self.partner, dtype=int)

    @property
    def num_gts(self) -> int:
        return len(self.gts)

    def gt_iou(self) -> np.ndarray:
        return pairwise_iou(self.gts, self.gts)

    @property
    def crowd_pairs(self) -> int:
        ious = np.triu(self.gt_iou(), 1)
        return int((ious > CROWD_IOU).sum())

    def crowd_mask(self, threshold: float = CROWD_IOU) -> np.ndarray:
        """GTs overlapping some other GT with IoU above ``threshold``."""
        ious = self.gt_iou()
        np.fill_diagonal(ious, 0.0)
        return (ious > threshold).any(axis=1)

    def to_dict(self) -> dict:
        return {
            "schema": SCENE_SCHEMA,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "gts": self.gts.tolist(),
            "partner": self.partner.tolist(),
            "crowd_pairs": self.crowd_pairs,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        if doc.get("schema") != SCENE_SCHEMA:
            raise ValueError(f"unsupported scene schema {doc.get('schema')!r}")
        return cls(tuple(doc["image_size"]), np.asarray(doc["gts"], dtype=float), int(doc["seed"]),
                   np.asarray(doc.get("partner", [-1] * len(doc["gts"]))))


def save_scenes(path, scenes: list[Scene], config: SceneConfig | None = None) -> None:
    doc = {"schema": SCENE_SCHEMA, "scenes": [s.to_dict() for s in scenes]}
    if config is not None:
        doc["config"] = asdict(config)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scenes(path) -> list[Scene]:
    with open(path) as fh:
        doc = json.load(fh)
    if "scenes" not in doc:
        return [Scene.from_dict(doc)]
    return [Scene.from_dict(s) for s in doc["scenes"]]


def _partner_shift(w: float, target_iou: float) -> float:
    # two equal boxes offset horizontally by dx have IoU (w - dx) / (w + dx)
    return w * (1.0 - target_iou) / (1.0 + target_iou)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    W, H = config.image_size
    n = config.num_gts
    n_partners = min(int(round(config.fraction * n)), n - 1)
    n_base = n - n_partners

    boxes: list[np.ndarray] = []
    partner: list[int] = []

    def fits(box, skip=-1):
        if box[0] < 0 or box[1] < 0 or box[2] > W or box[3] > H:
            return False
        if not boxes:
            return True
        ious = pairwise_iou(box[None], np.array(boxes))[0]
        if skip >= 0:
            ious[skip] = 0.0
        return bool(np.all(ious <= config.free_iou))

    def draw_size():
        h = rng.uniform(*config.height_range)
        return h / config.aspect, h

    for _ in range(n_base):
        for _try in range(config.max_tries):
            w, h = draw_size()
            if w > W or h > H:
                continue
            x, y =rng.uniform(0, W - w), rng.uniform(0, H - h)
            box = np.array([x, y, x + w, y + h])
            if fits(box):
                boxes.append(box)
                partner.append(-1)
                break
        else:
            raise PackingError(f"could not place GT {len(boxes)} after {config.max_tries} tries (seed {seed})")

    for _ in range(n_partners):
        for _try in range(config.max_tries):
            host = int(rng.integers(len(boxes)))
            hb = boxes[host]
            w, h = hb[2] - hb[0], hb[3] - hb[1]
            t = rng.uniform(*config.pair_iou_range)
            dx = _partner_shift(w, t) * (1 if rng.uniform() < 0.5 else -1)
            box = hb + np.array([dx, 0.0, dx, 0.0])
            if fits(box, skip=host):
                boxes.append(box)
                partner.append(host)
                break
        else:
            raise PackingError(f"could not place overlapping partner after {config.max_tries} tries (seed {seed})")

    return Scene((W, H), np.array(boxes), seed, np.array(partner))


@dataclass
class AnchorGrid:
    image_size: tuple[int, int]
    strides: dict[int, int]
    centers: np.ndarray
    levels: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    boxes: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.levels)

    def level_shape(self, level: int) -> tuple[int, int]:
        s = self.strides[level]
        W, H = self.image_size
        return math.ceil(H / s), math.ceil(W / s)


def build_anchor_grid(
    image_size=(512, 512),
    levels=(3, 4, 5, 6, 7),
    strides=(8, 16, 32, 64, 128),
    anchor_scale: float = 4.0,
    aspect: float = 3.0,
) -> AnchorGrid:
    """One anchor per stride cell per level, centred in the cell.

    Anchor boxes (for IoU-threshold candidates) have area
    ``(anchor_scale * stride)**2`` and height:width ``aspect``.
    """
    W, H = image_size
    centers, lv, rr, cc, boxes = [], [], [], [], []
    for level, s in zip(levels, strides):
        if s <= 0 or s & (s - 1):
            raise ValueError(f"stride {s} is not a power of two")
        ny, nx = math.ceil(H / s), math.ceil(W / s)
        yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
        c = np.stack([(xx.ravel() + 0.5) * s, (yy.ravel() + 0.5) * s], axis=1)
        side = anchor_scale * s
        bw, bh = side / math.sqrt(aspect), side * math.sqrt(aspect)
        centers.append(c)
        lv.append(np.full(ny * nx, level))
        rr.append(yy.ravel())
        cc.append(xx.ravel())
        boxes.append(np.hstack([c - [bw / 2, bh / 2], c + [bw / 2, bh / 2]]))
    return AnchorGrid(
        (W, H), dict(zip(levels, strides)), np.vstack(centers), np.concatenate(lv),
        np.concatenate(rr), np.concatenate(cc), np.vstack(boxes),
    )


@dataclass
class Predictions:
    boxes: np.ndarray
    scores: np.ndarray
    nearest_gt: np.ndarray


def nearest_gt(scene: Scene, grid: AnchorGrid) -> tuple[np.ndarray, np.ndarray]:
    gc = box_centers(scene.gts)
    d = np.sqrt(((grid.centers[:, None, :] - gc[None, :, :]) ** 2).sum(-1))
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(idx)), idx]


def _truncated_normal(rng, size, limit=3.0):
    z = rng.standard_normal(size)
    bad = np.abs(z) > limit
    while bad.any():
        z[bad] = rng.standard_normal(bad.sum())
        bad = np.abs(z) > limit
    return z


def simulate_predictions(
    scene: Scene,
    grid: AnchorGrid,
    noise: float = 0.1,
    score_noise: float = 0.05,
    seed: int = 0,
    growth: float = 1.0,
) -> Predictions:
    """Per-anchor regressed boxes and scores.

    Anchor j predicts its nearest GT (by centre distance) with centre jitter
    ``noise * (1 + growth * dist / size)**2`` times the GT width/height and
    log-size jitter half that, Gaussian truncated at 3 sigma. The score is the
    IoU of the prediction with that GT plus uniform noise in +-score_noise.
    """
    rng = np.random.default_rng(seed)
    idx, dist = nearest_gt(scene, grid)
    gt = scene.gts[idx]
    w = gt[:, 2] - gt[:, 0]
    h = gt[:, 3] - gt[:, 1]
    size = np.sqrt(w * h)
    sigma = noise * (1.0 + growth * dist / size) ** 2
    n = len(idx)
    z = _truncated_normal(rng, (n, 4))
    cx = 0.5 * (gt[:, 0] + gt[:, 2]) + sigma * w * z[:, 0]
    cy = 0.5 * (gt[:, 1] + gt[:, 3]) + sigma * h * z[:, 1]
    pw = w * np.exp(0.5 * sigma * z[:, 2])
    ph = h * np.exp(0.5 * sigma * z[:, 3])
    boxes = np.stack([cx - pw / 2, cy - ph / 2, cx + pw / 2, cy + ph / 2], axis=1)
    q = elementwise_iou(boxes, gt)
    scores = np.clip(q + rng.uniform(-score_noise, score_noise, n), 1e-3, 1.0)
    return Predictions(boxes, scores, idx)


def density_from_plan(plan: TransportPlan | np.ndarray, grid: AnchorGrid | None = None) -> DensityMap:
    pi = plan.pi if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    values = pi.sum(axis=0)
    if grid is None:
        zeros = np.zeros(values.size, dtype=int)
        return DensityMap(values, zeros, zeros, np.arange(values.size))
    return DensityMap(values, grid.levels, grid.rows, grid.cols)


def bilinear_density(density: DensityMap, grid: AnchorGrid, anchors: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Density sampled bilinearly at ``points`` on each anchor's own level map."""
    out = np.empty(len(anchors))
    for level in np.unique(grid.levels[anchors]):
        sel = grid.levels[anchors] == level
        g = np.zeros(grid.level_shape(level))
        lv = density.levels == level
        g[density.rows[lv], density.cols[lv]] = density.values[lv]
        s = grid.strides[level]
        # cell centres sit at (k + 0.5) * stride
        fx = np.clip(points[sel, 0] / s - 0.5, 0, g.shape[1] - 1)
        fy = np.clip(points[sel, 1] / s - 0.5, 0, g.shape[0] - 1)
        x0, y0 = np.floor(fx).astype(int), np.floor(fy).astype(int)
        x1, y1 = np.minimum(x0 + 1, g.shape[1] - 1), np.minimum(y0 + 1, g.shape[0] - 1)
        ax, ay = fx - x0, fy - y0
        out[sel] = ((1 - ay) * ((1 - ax) * g[y0, x0] + ax * g[y0, x1])
                    + ay * ((1 - ax) * g[y1, x0] + ax * g[y1, x1]))
    return out


def gt_boxes(scene: Scene) -> list[BBox]:
    return to_boxes(scene.gts)
