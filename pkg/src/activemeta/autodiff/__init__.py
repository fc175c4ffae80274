"""Reverse-mode automatic differentiation with gradient-of-gradient support."""

from .check import finite_diff_check, numeric_grad
from .ops import (
    add,
    as_tensor,
    bias_add,
    conv2d,
    expand,
    matmul,
    max_pool2,
    mul,
    neg,
    relu,
    reshape,
    scale,
    softmax_channels,
    softmax_cross_entropy,
    sub,
    sum_all,
    transpose,
    upsample2_conv3x3,
    upsample2_nearest,
)
from .tensor import Node, Tape, Tensor, grad

__all__ = [
    "Node", "Tape", "Tensor", "grad", "finite_diff_check", "numeric_grad",
    "add", "as_tensor", "bias_add", "conv2d", "expand", "matmul", "max_pool2", "mul", "neg",
    "relu", "reshape", "scale", "softmax_channels", "softmax_cross_entropy", "sub", "sum_all",
    "transpose", "upsample2_conv3x3", "upsample2_nearest",
]
