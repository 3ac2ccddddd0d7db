"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from . import ops
from ._kernels import get_backend, set_backend
from .gradcheck import max_rel_error, numerical_grad
from .ops import (
    add,
    concat,
    conv1d,
    conv2d,
    cross_entropy,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    maxpool1d,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    sum,
    swapaxes,
    window_out_len,
)
from .tensor import ContractError, NumericError, ShapeError, TapeNode, Tensor, backward, no_grad, parameter

__all__ = [
    "ContractError",
    "NumericError",
    "ShapeError",
    "TapeNode",
    "Tensor",
    "add",
    "backward",
    "concat",
    "conv1d",
    "conv2d",
    "cross_entropy",
    "gelu",
    "get_backend",
    "getitem",
    "layer_norm",
    "linear",
    "matmul",
    "max_rel_error",
    "maxpool1d",
    "mean",
    "mul",
    "no_grad",
    "numerical_grad",
    "ops",
    "parameter",
    "reshape",
    "scale",
    "set_backend",
    "softmax",
    "sum",
    "swapaxes",
    "window_out_len",
]
