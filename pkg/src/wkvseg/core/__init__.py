"""Dense tensor substrate with tape-based reverse-mode differentiation."""

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_parameter_grads, finite_diff_grad, rel_error
from .module import Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module, trunc_normal
from .ops import (
    conv2d,
    depthwise_conv2d,
    layer_norm,
    matmul,
    sigmoid,
    squared_relu,
)
from .tensor import (
    DEFAULT_DTYPE,
    Parameter,
    Tape,
    Tensor,
    active_tape,
    backward,
    finite_checks,
    make_op,
)

__all__ = [
    "DEFAULT_DTYPE", "Conv2d", "DepthwiseConv2d", "LayerNorm", "Linear", "Module",
    "Parameter", "Tape", "Tensor", "active_tape", "backward", "check_parameter_grads",
    "conv2d", "depthwise_conv2d", "finite_checks", "finite_diff_grad", "layer_norm",
    "load_checkpoint", "make_op", "matmul", "ops", "rel_error", "save_checkpoint",
    "sigmoid", "squared_relu", "trunc_normal",
]
