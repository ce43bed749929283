"""Small deterministic neural-network engine: layers with hand-written
backward passes, Adam, finite-difference checking and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .fusion import AttentionFuse, Splice
from .gradcheck import grad_check, rel_error
from .layers import (
    LSTM,
    BatchNorm,
    BiLSTM,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Layer,
    MaxPool2D,
    NumericError,
    Param,
    ReLU,
    Reshape,
    Residual,
    Sequential,
    check_finite,
    softmax,
    softmax_xent,
)
from .optim import Adam, AdamState

__all__ = [
    "Adam", "AdamState", "AttentionFuse", "BatchNorm", "BiLSTM", "Conv2D", "Dense", "Dropout",
    "Flatten", "GlobalAvgPool", "LSTM", "Layer", "MaxPool2D", "NumericError", "Param", "ReLU",
    "Reshape", "Residual", "Sequential", "Splice", "check_finite", "grad_check", "load_checkpoint",
    "rel_error", "save_checkpoint", "softmax", "softmax_xent",
]
