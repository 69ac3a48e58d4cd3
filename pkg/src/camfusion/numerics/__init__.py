"""Tensors, reverse-mode differentiation, AdamW and the learning-rate schedule."""

from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    div,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    log_sigmoid,
    matmul,
    mean,
    mul,
    neg,
    reshape,
    sigmoid,
    softmax,
    sub,
    swapaxes,
    take,
)
from .tensor import sum as tsum

__all__ = [
    "ContractError", "ShapeError", "Tape", "Tensor", "LrSchedule", "OptimizerState",
    "adamw_step", "lr_at", "add", "as_tensor", "backward", "div", "exp", "gelu",
    "l2_normalize", "layer_norm", "log", "log_sigmoid", "matmul", "mean", "mul", "neg",
    "reshape", "sigmoid", "softmax", "sub", "swapaxes", "take", "tsum",
]
