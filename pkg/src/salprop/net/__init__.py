from .augment import AugmentRanges, augment
from .losses import ClassWeights, compute_class_weights, loss_cls, loss_rpn
from .model import DetOutput, Model, ModelConfig, lse_pool
from .train import Adam, LogRow, TrainConfig, TrainingDiverged, train, write_log_csv

__all__ = [
    "Adam",
    "AugmentRanges",
    "ClassWeights",
    "DetOutput",
    "LogRow",
    "Model",
    "ModelConfig",
    "TrainConfig",
    "TrainingDiverged",
    "augment",
    "compute_class_weights",
    "loss_cls",
    "loss_rpn",
    "lse_pool",
    "train",
    "write_log_csv",
]
