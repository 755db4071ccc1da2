"""Minimal dense-tensor library with reverse-mode differentiation."""

from .functional import (
    causal_mask,
    dropout,
    embedding,
    label_smoothed_nll,
    layer_norm,
    linear,
    log_softmax,
    masked_softmax,
    mse,
    prefix_mask,
    softmax,
    squared_norm,
    squash,
)
from .gradcheck import check_grads, numeric_grad
from .optim import Adam, inverse_sqrt_lr
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    einsum,
    exp,
    grad_enabled,
    log,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    sqrt,
    square,
    sub,
    tanh,
    transpose,
    tsum,
    where,
)

__all__ = [
    "Adam", "Tensor", "add", "as_tensor", "backward", "causal_mask", "check_grads", "concat",
    "div", "dropout", "einsum", "embedding", "exp", "grad_enabled", "inverse_sqrt_lr",
    "label_smoothed_nll", "layer_norm", "linear", "log", "log_softmax", "masked_softmax",
    "matmul", "mse", "mul", "no_grad", "numeric_grad", "prefix_mask", "relu", "reshape",
    "softmax", "sqrt", "square", "squared_norm", "squash", "sub", "tanh", "transpose",
    "tsum", "where",
]
