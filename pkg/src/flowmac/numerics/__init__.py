"""Minimal tensor arithmetic with tape-based reverse-mode autodiff."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import analytic_grads, check_gradients, max_relative_error, numeric_grads
from .optim import Adam, MissingGradError, clip_global_norm
from .ops import (
    OP_REGISTRY,
    add,
    concat,
    conv1d,
    div,
    dropout_mask_apply,
    exp,
    forward_op,
    group_norm,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    power,
    reshape,
    sigmoid,
    sin,
    slice_,
    softmax,
    sub,
    sum_,
    tanh,
    transpose,
)
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    default_dtype,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "active_tape",
    "ShapeError",
    "default_dtype",
    "set_default_dtype",
    "OP_REGISTRY",
    "forward_op",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv1d",
    "transpose",
    "reshape",
    "concat",
    "slice_",
    "softmax",
    "layer_norm",
    "group_norm",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "sin",
    "power",
    "mean",
    "sum_",
    "dropout_mask_apply",
    "Adam",
    "MissingGradError",
    "clip_global_norm",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "numeric_grads",
    "analytic_grads",
    "max_relative_error",
    "check_gradients",
]
