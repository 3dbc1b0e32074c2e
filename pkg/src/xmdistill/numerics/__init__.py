"""Dense float64 tensors, reverse-mode differentiation and seeded RNG."""

from .gradcheck import finite_diff_check
from .kernels import BACKEND
from .rng import SeededRng
from .tensor import (
    GradTape,
    Tensor,
    add,
    as_tensor,
    backward,
    conv1d,
    conv_out_length,
    cos,
    div,
    exp,
    gelu,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    reduce_mean,
    reshape,
    sin,
    softmax,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "BACKEND",
    "GradTape",
    "SeededRng",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "conv1d",
    "conv_out_length",
    "cos",
    "div",
    "exp",
    "finite_diff_check",
    "gelu",
    "getitem",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "neg",
    "reduce_mean",
    "reshape",
    "sin",
    "softmax",
    "sqrt",
    "stack",
    "sub",
    "transpose",
    "tsum",
]
