"""Confidence-based region mixing for unsupervised detector adaptation, on a toy grid detector."""

from .detection import Box, Detection, GaussianBox, box_confidence, combined_confidence, iou, nms
from .evaluation import APResult, average_precision, evaluate_detections, match_detections
from .losses import classification_loss, consistency_weight, gaussian_box_loss, objectness_loss, total_loss
from .mixing import MixPlan, MixStrategy, assign_regions, combine_labels, compose, plan_mix
from .schedule import Clock, Mode, Schedule, blended_confidence, filter_pseudo, progress_ratio, shifting_weight
from .training import RunConfig, run_adapt, run_oracle, run_pretrain, run_sweep

__version__ = "0.1.0"

__all__ = [
    "APResult", "Box", "Clock", "Detection", "GaussianBox", "MixPlan", "MixStrategy", "Mode", "RunConfig",
    "Schedule", "assign_regions", "average_precision", "blended_confidence", "box_confidence",
    "classification_loss", "combine_labels", "combined_confidence", "compose", "consistency_weight",
    "evaluate_detections", "filter_pseudo", "gaussian_box_loss", "iou", "match_detections", "nms",
    "objectness_loss", "plan_mix", "progress_ratio", "run_adapt", "run_oracle", "run_pretrain", "run_sweep",
    "shifting_weight", "total_loss",
]
