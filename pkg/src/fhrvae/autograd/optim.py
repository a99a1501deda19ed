"""
Adaptive-moment (Adam) updates over named parameter arrays.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Returns new parameter arrays and a new state; the inputs are not mutated.
    A missing gradient (None) counts as zero.
    """
    step = state.step + 1
    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(value)
        elif grad.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        m_prev = state.m.get(name, np.zeros_like(value))
        v_prev = state.v.get(name, np.zeros_like(value))
        m = beta1 * m_prev + (1.0 - beta1) * grad
        v = beta2 * v_prev + (1.0 - beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = (value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype)
        new_m[name] = m
        new_v[name] = v

    return new_params, AdamState(step=step, m=new_m, v=new_v)


class AdamOptimizer:
    """Applies `adam_step` in place to a set of trainable tensors."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        values = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        updated, self.state = adam_step(
            values, grads, self.state, self.lr, self.beta1, self.beta2, self.eps
        )
        for name, p in self.params.items():
            p.data = updated[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
