"""Multi-task floor-plan recognition: wall segmentation plus door/window detection."""

from .config import (
    ConfigError,
    DataError,
    ModelConfig,
    NumericError,
    ShapeError,
    SynthSpec,
    TrainConfig,
    desk_train_config,
    load_config,
)
from .data import Sample, generate_floorplan, load_split, resize_sample, synthesize_dataset
from .estimator import MuraNet
from .heads import Detection, decode_detections
from .losses import detection_loss, seg_class_weights, seg_weighted_ce, total_loss
from .metrics import average_precision, box_iou, evaluate, mask_iou
from .model import load_checkpoint, save_checkpoint
from .network import MuraNetModel, init_model
from .train import Trainer, convergence_epoch, lr_at, train_run

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "Detection",
    "ModelConfig",
    "MuraNet",
    "MuraNetModel",
    "NumericError",
    "Sample",
    "ShapeError",
    "SynthSpec",
    "TrainConfig",
    "Trainer",
    "average_precision",
    "box_iou",
    "convergence_epoch",
    "decode_detections",
    "desk_train_config",
    "detection_loss",
    "evaluate",
    "generate_floorplan",
    "init_model",
    "load_checkpoint",
    "load_config",
    "load_split",
    "lr_at",
    "mask_iou",
    "resize_sample",
    "save_checkpoint",
    "seg_class_weights",
    "seg_weighted_ce",
    "synthesize_dataset",
    "total_loss",
    "train_run",
]
