"""Minimal dense-tensor engine with reverse-mode differentiation."""
from .conv import CIRCULAR, ZERO, PaddingMode, circular_pad, conv2d, pad2d, zero_pad
from .core import (
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
from .gradcheck import grad_check, numeric_gradient
from .ops import (
    add,
    add_bias,
    add_n,
    batch_norm,
    concat,
    exp,
    gather_rows,
    getitem,
    leaky_relu,
    log,
    matmul,
    max_pool_over_group,
    mean,
    mul,
    neg,
    relu,
    reshape,
    segment_max,
    segment_mean,
    softmax,
    sub,
    transpose,
    upsample_nearest,
)
from .ops import sum as tsum

__all__ = [
    "CIRCULAR", "ZERO", "PaddingMode", "Tensor", "add", "add_bias", "add_n", "as_tensor",
    "batch_norm", "circular_pad", "concat", "conv2d", "default_dtype", "exp", "gather_rows",
    "get_default_dtype", "getitem", "grad_check", "is_grad_enabled", "leaky_relu", "log",
    "matmul", "max_pool_over_group", "mean", "mul", "neg", "no_grad", "numeric_gradient",
    "pad2d", "relu", "reshape", "segment_max", "segment_mean", "set_default_dtype", "softmax",
    "sub", "transpose", "tsum", "upsample_nearest", "zero_pad",
]
