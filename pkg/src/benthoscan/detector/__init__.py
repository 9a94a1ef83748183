"""Two-stage detector: model, losses, training, and inference."""

from .model import (
    BatchPlan,
    Backbone,
    BoxHead,
    CDDetector,
    ContextBranch,
    ImagePlan,
    LossBreakdown,
    RPNHead,
    TrainBatch,
    VanillaDetector,
    box_iou_matrix,
    compute_loss,
    decode_boxes,
    encode_boxes,
    fuse_global,
    make_anchors,
    make_plan,
    nrd_filter,
    parameter_count,
    vanilla_loss,
)
from .train import (
    EvalSet,
    FrameExample,
    TrainResult,
    TrainingDiverged,
    evaluate_detector,
    infer,
    load_checkpoint,
    save_checkpoint,
    train_detector,
)

__all__ = [
    "Backbone",
    "BatchPlan",
    "BoxHead",
    "CDDetector",
    "ContextBranch",
    "EvalSet",
    "FrameExample",
    "ImagePlan",
    "LossBreakdown",
    "RPNHead",
    "TrainBatch",
    "TrainResult",
    "TrainingDiverged",
    "VanillaDetector",
    "box_iou_matrix",
    "compute_loss",
    "decode_boxes",
    "encode_boxes",
    "evaluate_detector",
    "fuse_global",
    "infer",
    "load_checkpoint",
    "make_anchors",
    "make_plan",
    "nrd_filter",
    "parameter_count",
    "save_checkpoint",
    "train_detector",
    "vanilla_loss",
]
