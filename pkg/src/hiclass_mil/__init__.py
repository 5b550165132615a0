"""Hierarchical multiple-instance learning for coarse/fine slide classification."""

from .estimator import HiClassMIL
from .losses import LossBreakdown, LossConfig, total_loss
from .model import ForwardTrace, ModelConfig, backward, forward, init_params
from .taxonomy import Taxonomy, gastric
from .trainer import TrainConfig, train

__all__ = [
    "ForwardTrace",
    "HiClassMIL",
    "LossBreakdown",
    "LossConfig",
    "ModelConfig",
    "Taxonomy",
    "TrainConfig",
    "backward",
    "forward",
    "gastric",
    "init_params",
    "total_loss",
    "train",
]

__version__ = "0.1.0"
