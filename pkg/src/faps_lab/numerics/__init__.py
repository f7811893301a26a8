"""Minimal tensor + reverse-mode autodiff core."""
from .tensor import (
    ConfigError, ShapeError, Tensor, add, backward, cross_entropy, default_dtype,
    depthwise_conv1d, elementwise, gelu, l1_loss, layer_norm, matmul, mul, no_grad,
    parameter, precision, relu, scale, softmax_rows, sub, sum_all, take, transpose, zero_grad,
)
from .optim import AdamState, adam_step
from .gradcheck import GradCheckReport, NondeterminismError, finite_difference_check

__all__ = [
    "AdamState", "ConfigError", "GradCheckReport", "NondeterminismError", "ShapeError",
    "Tensor", "adam_step", "add", "backward", "cross_entropy", "default_dtype",
    "depthwise_conv1d", "elementwise", "finite_difference_check", "gelu", "l1_loss",
    "layer_norm", "matmul", "mul", "no_grad", "parameter", "precision", "relu", "scale",
    "softmax_rows", "sub", "sum_all", "take", "transpose", "zero_grad",
]
