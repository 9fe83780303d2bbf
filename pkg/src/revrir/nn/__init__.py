"""Minimal reverse-mode autodiff and training primitives."""

from .checkpoint import params_digest, read_checkpoint, write_checkpoint
from .layers import BatchNorm1d, Dropout, Linear, Module, ReLU, Sequential, ff_block, xavier_uniform
from .optim import AdamW, LrSchedule, ScheduleKind, lr_at
from .tensor import Tensor, as_tensor, concat, l2_normalize, no_grad, relu, softmax_cross_entropy

__all__ = [
    "AdamW",
    "BatchNorm1d",
    "Dropout",
    "Linear",
    "LrSchedule",
    "Module",
    "ReLU",
    "ScheduleKind",
    "Sequential",
    "Tensor",
    "as_tensor",
    "concat",
    "ff_block",
    "l2_normalize",
    "lr_at",
    "no_grad",
    "params_digest",
    "read_checkpoint",
    "relu",
    "softmax_cross_entropy",
    "write_checkpoint",
    "xavier_uniform",
]
