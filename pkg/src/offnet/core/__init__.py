"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .functional import (
    conv2d,
    conv_output_size,
    gather_class,
    linear,
    resize_bilinear,
    resize_bilinear_array,
)
from .gradcheck import GradCheckReport, OracleError, grad_check, relative_error
from .tensor import (
    DEFAULT_DTYPE,
    DimensionError,
    GraphError,
    Parameter,
    Tensor,
    add,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    reshape,
    sigmoid,
    softmax,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "DEFAULT_DTYPE",
    "DimensionError",
    "GradCheckReport",
    "GraphError",
    "OracleError",
    "Parameter",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "clip",
    "concat",
    "conv2d",
    "conv_output_size",
    "div",
    "exp",
    "gather_class",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "power",
    "relative_error",
    "reshape",
    "resize_bilinear",
    "resize_bilinear_array",
    "sigmoid",
    "softmax",
    "sub",
    "transpose",
    "tsum",
]
