"""Ventral-stream (V1/V2/V4/IT) network for 2-D stroke-lesion segmentation."""

__version__ = "0.1.0"

from .checkpoint import load_weights, save_weights
from .estimator import VcaSegmenter
from .losses import LossBreakdown, LossConfig, combined_loss
from .metrics import ConfusionCounts, MetricsRow, aggregate, evaluate_pair
from .model import ModelConfig, StageOutputs, VcaNet, build, predict_mask, small_config
from .trainer import TrainConfig, evaluate, overfit_smoke, train

__all__ = [
    "load_weights", "save_weights", "VcaSegmenter", "LossBreakdown", "LossConfig", "combined_loss",
    "ConfusionCounts", "MetricsRow", "aggregate", "evaluate_pair", "ModelConfig", "StageOutputs",
    "VcaNet", "build", "predict_mask", "small_config", "TrainConfig", "evaluate", "overfit_smoke", "train",
]
