"""Density-guided anchor assignment with unbalanced optimal transport and DG-NMS."""

from dgdet.config import ExperimentConfig
from dgdet.cost import overlap_aware_cost
from dgdet.dga import decode_assignment, detection_loss, uot_loss
from dgdet.geometry import BBox, pairwise_iou
from dgdet.metrics import EvalReport, evaluate
from dgdet.nms import Detection, dg_nms, vanilla_nms
from dgdet.pipeline import run_pipeline, run_sweep
from dgdet.scene import SceneConfig, build_anchor_grid, generate_scene
from dgdet.uot import TransportPlan, TransportProblem, solve_uot

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "EvalReport", "ExperimentConfig", "SceneConfig", "TransportPlan", "TransportProblem",
    "build_anchor_grid", "decode_assignment", "detection_loss", "dg_nms", "evaluate", "generate_scene",
    "overlap_aware_cost", "pairwise_iou", "run_pipeline", "run_sweep", "solve_uot", "uot_loss", "vanilla_nms",
]
