"""Minimal reverse-mode autodiff over dense numpy arrays."""

from .gradcheck import GradCheckReport, grad_check
from .nn import (
    FrozenKernels,
    activation,
    conv2d,
    convolve_frozen,
    interpolate_planes,
    leaky_relu,
    normalize_channels,
    pad2d,
    plane_index,
    relu,
    resample,
    sigmoid,
    sine,
    tanh,
    upsample2x,
)
from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    clamp,
    concat,
    cos,
    div,
    elementwise,
    exp,
    get_default_dtype,
    log,
    matmul,
    mul,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    reshape,
    set_default_dtype,
    sin,
    smooth_abs,
    sqrt,
    sub,
    take,
    transpose,
)

__all__ = [
    "FrozenKernels", "GradCheckReport", "GraphError", "NonFiniteError", "Tensor",
    "activation", "add", "as_tensor", "clamp", "concat", "conv2d", "convolve_frozen",
    "cos", "div", "elementwise", "exp", "get_default_dtype", "grad_check",
    "interpolate_planes", "leaky_relu", "log", "matmul", "mul", "no_grad",
    "normalize_channels", "pad2d", "plane_index", "power", "reduce_mean", "reduce_sum",
    "relu", "resample", "reshape", "set_default_dtype", "sigmoid", "sin", "sine",
    "smooth_abs", "sqrt", "sub", "take", "tanh", "transpose", "upsample2x",
]
