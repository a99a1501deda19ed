"""
Minimal dense-array autodiff used by the VAE
Provides Tensor primitives, the reverse-mode Tape and an Adam optimizer
"""

from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    exp,
    layer_norm,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    square,
    sub,
    sum,
    take,
    tanh,
    transpose,
)
from .optim import AdamOptimizer, AdamState, adam_step

__all__ = [
    "AdamOptimizer",
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "broadcast_to",
    "clip",
    "concat",
    "exp",
    "layer_norm",
    "log",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "parameter",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "square",
    "sub",
    "sum",
    "take",
    "tanh",
    "transpose",
]
