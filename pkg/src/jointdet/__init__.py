"""Joint weakly and semi-supervised mass detection.

A two-stage detector trained on a few box-annotated images plus many images
that carry only a diagnosis label, with an optional self-training round.
"""

from .core_types import (BBox, DiagnosisLabel, ImageRecord, RegionClass, RegionPrediction,
                         StrongAnnotation, WeakAnnotation, iou, nms)
from .detector import DetectorConfig, TwoStageDetector, load_checkpoint, save_checkpoint
from .estimator import JointDetector, SelfTrainingDetector, check_records
from .evaluation import corloc, evaluate_raw, froc, fp_per_normal, postprocess
from .losses import MoICriterion, mil_loss, select_moi, strong_loss
from .self_training import PromotionConfig, promote, self_train
from .training import JointTrainer, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BBox", "DetectorConfig", "DiagnosisLabel", "ImageRecord", "JointDetector", "JointTrainer",
    "MoICriterion", "PromotionConfig", "RegionClass", "RegionPrediction", "SelfTrainingDetector",
    "StrongAnnotation", "TrainConfig", "TwoStageDetector", "WeakAnnotation", "check_records",
    "corloc", "evaluate_raw", "fp_per_normal", "froc", "iou", "load_checkpoint", "mil_loss",
    "nms", "postprocess", "promote", "save_checkpoint", "select_moi", "self_train",
    "strong_loss", "train",
]
