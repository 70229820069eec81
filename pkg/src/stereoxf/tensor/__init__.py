"""Dense float tensors with reverse-mode autodiff, plus Adam."""

from .adam import Adam, AdamState, adam_step
from .core import DTYPE, ShapeError, Tensor, as_tensor, grad_enabled, make_op, no_grad
from .gradcheck import GradcheckReport, gradcheck
from .ops import (
    absolute,
    activation,
    add,
    channel_max,
    channel_sum,
    concat,
    conv2d,
    div,
    elementwise,
    grid_sample_bilinear,
    leaky_relu,
    max2,
    mean,
    mean_abs,
    mul,
    reduce,
    repeat_channels,
    reshape,
    sigmoid,
    sub,
    tanh,
    total,
    upsample_bilinear2x,
)

__all__ = [
    "DTYPE", "Adam", "AdamState", "GradcheckReport", "ShapeError", "Tensor",
    "absolute", "activation", "adam_step", "add", "as_tensor", "channel_max",
    "channel_sum", "concat", "conv2d", "div", "elementwise", "grad_enabled",
    "gradcheck", "grid_sample_bilinear", "leaky_relu", "make_op", "max2", "mean",
    "mean_abs", "mul", "no_grad", "reduce", "repeat_channels", "reshape", "sigmoid",
    "sub", "tanh", "total", "upsample_bilinear2x",
]
