from .boxes import iou, iou_matrix, match_positive_proposals, nms
from .model import DetectorDescriptor, TinyTwoStageDetector
from .train import (
    ClipCeDetector,
    Detection,
    TrainConfig,
    TrainResult,
    latest_checkpoint,
    load_detector,
    predict,
    train,
)

__all__ = [
    "ClipCeDetector",
    "Detection",
    "DetectorDescriptor",
    "TinyTwoStageDetector",
    "TrainConfig",
    "TrainResult",
    "iou",
    "iou_matrix",
    "latest_checkpoint",
    "load_detector",
    "match_positive_proposals",
    "nms",
    "predict",
    "train",
]
