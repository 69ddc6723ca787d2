"""Experiment configuration.

One YAML file (JSON also parses) describes a run. Precedence, lowest first:
dataclass defaults, then the config file, then command-line overrides given
as dotted ``key=value`` pairs (``scene.num_gts=30``, ``th_pos=0.8``).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from dgdet.cost import DEFAULT_SOI, ConfigurationError, LevelSpec
from dgdet.dga import STRATEGIES
from dgdet.nms import VARIANTS
from dgdet.scene import SceneConfig

CONFIG_SCHEMA = "dgdet.config/1"
PRIORS = ("center_prior", "iou_threshold")
COST_TYPES = ("overlap_aware", "iou")
NMS_MODES = ("dg", "vanilla")
DENSITY_LOOKUPS = ("anchor", "bilinear")
TRANSPORT_TERMS = ("entropic", "plain")
NORMALIZERS = ("pos_plus_neg", "pos")
# entropic strength when epsilon is left unset
DEFAULT_EPSILON = {"center_prior": 0.7, "iou_threshold": 0.1}


def _default_soi():
    return {k: tuple(v) for k, v in DEFAULT_SOI.items()}


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0
    num_scenes: int = 1

    # anchor grid
    levels: tuple[int, ...] = (3, 4, 5, 6, 7)
    strides: tuple[int, ...] = (8, 16, 32, 64, 128)
    anchor_scale: float = 4.0

    # candidates and cost
    prior: str = "center_prior"
    radius: int = 5
    iou_threshold: float = 0.5
    soi: dict = field(default_factory=_default_soi)
    level_band: float = 0.25
    use_level_cost: bool = True
    cost_type: str = "overlap_aware"
    score_term: bool = False
    gamma: float = 2.0

    # solver
    epsilon: float | None = None
    rho: float | None = 1.0
    max_iter: int = 500
    tol: float = 1e-6

    # assignment
    th_pos: float = 0.7
    th_neg: float = 0.8
    strategy: str = "dyn_k_star"
    fix_k: int = 10

    # losses
    object_wise: bool = True
    anchor_wise: bool = True
    transport_term: str = "entropic"
    gamma1: float = 2.0
    gamma2: float = 0.25
    normalizer: str = "pos_plus_neg"

    # simulated detector and suppression
    noise: float = 0.1
    score_noise: float = 0.05
    jitter_growth: float = 1.0
    score_threshold: float = 0.05
    pre_nms_topk: int = 1000
    nms: str = "dg"
    nms_variant: str = "linear"
    sigma: float = 0.5
    vanilla_threshold: float = 0.5
    density_lookup: str = "anchor"

    # evaluation and run control
    eval_iou: float = 0.5
    per_image_ji: bool = True
    workers: int = 4
    output_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = SceneConfig(**self.scene)
        self.levels = tuple(int(v) for v in self.levels)
        self.strides = tuple(int(v) for v in self.strides)
        self.soi = {int(k): (float(v[0]), float(v[1])) for k, v in self.soi.items()}
        self.validate()

    @property
    def seeds(self) -> list[int]:
        return list(range(self.seed, self.seed + self.num_scenes))

    @property
    def resolved_epsilon(self) -> float:
        return DEFAULT_EPSILON[self.prior] if self.epsilon is None else self.epsilon

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigurationError(msg)

        choices = [("prior", PRIORS), ("cost_type", COST_TYPES), ("strategy", STRATEGIES),
                   ("nms", NMS_MODES), ("nms_variant", VARIANTS), ("density_lookup", DENSITY_LOOKUPS),
                   ("transport_term", TRANSPORT_TERMS), ("normalizer", NORMALIZERS)]
        for name, allowed in choices:
            need(getattr(self, name) in allowed, f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        need(self.num_scenes >= 1, "num_scenes must be >= 1")
        need(len(self.levels) == len(self.strides) and self.levels, "levels and strides must pair up")
        need(set(self.levels) <= set(self.soi), f"SoI table lacks levels {sorted(set(self.levels) - set(self.soi))}")
        LevelSpec([], self.soi)
        need(self.radius >= 1, "radius must be >= 1")
        need(0.0 <= self.iou_threshold < 1.0, "iou_threshold must lie in [0, 1)")
        need(0.0 < self.th_pos <= self.th_neg <= 1.0, "need 0 < th_pos <= th_neg <= 1")
        need(self.fix_k >= 1, "fix_k must be >= 1")
        need(self.epsilon is None or self.epsilon > 0, "epsilon must be positive")
        need(self.rho is None or self.rho > 0, "rho must be positive (or null for balanced)")
        need(self.max_iter >= 1 and self.tol > 0, "max_iter >= 1 and tol > 0 required")
        need(self.gamma >= 0 and self.level_band >= 0, "gamma and level_band must be >= 0")
        need(self.sigma > 0, "sigma must be positive")
        need(0.0 < self.vanilla_threshold < 1.0, "vanilla_threshold must lie in (0, 1)")
        need(0.0 <= self.score_threshold < 1.0, "score_threshold must lie in [0, 1)")
        need(self.pre_nms_topk >= 1 and self.workers >= 1, "pre_nms_topk and workers must be >= 1")
        need(0.0 < self.eval_iou < 1.0, "eval_iou must lie in (0, 1)")
        need(self.noise >= 0 and self.score_noise >= 0, "noise levels must be >= 0")

    # serialisation

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["scene"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in doc["scene"].items()}
        doc["levels"] = list(self.levels)
        doc["strides"] = list(self.strides)
        doc["soi"] = {k: list(v) for k, v in self.soi.items()}
        return {"schema": CONFIG_SCHEMA, **doc}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigurationError(f"unsupported config schema {schema!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {unknown}")
        if "scene" in doc:
            scene = dict(doc["scene"])
            bad = sorted(set(scene) - {f.name for f in fields(SceneConfig)})
            if bad:
                raise ConfigurationError(f"unknown scene fields: {bad}")
            doc["scene"] = SceneConfig(**scene)
        return cls(**doc)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a mapping")
        return cls.from_dict(doc)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_yaml())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides applied; values parse as YAML scalars."""
        doc = self.to_dict()
        items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
        for key, value in items:
            if isinstance(value, str):
                value = yaml.safe_load(value)
            set_dotted(doc, key, value)
        return ExperimentConfig.from_dict(doc)


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"override must look like key=value, got {text!r}")
    return key.strip(), value.strip()


def set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    target = doc
    for p in parts[:-1]:
        if not isinstance(target.get(p), dict):
            raise ConfigurationError(f"unknown config field {key!r}")
        target = target[p]
    if parts[-1] not in target:
        raise ConfigurationError(f"unknown config field {key!r}")
    target[parts[-1]] = copy.deepcopy(value)


def known_fields() -> list[str]:
    """Every overridable dotted key."""
    top = [f.name for f in fields(ExperimentConfig) if f.name != "scene"]
    return top + [f"scene.{f.name}" for f in fields(SceneConfig)]
