"""
Dense arrays with reverse-mode automatic differentiation.

Every primitive computes its forward value with numpy and, when any operand
requires a gradient, keeps a pullback closure that maps the output cotangent
to one cotangent per operand. `backward` orders the reachable graph on a
Tape and walks it once in reverse.

Broadcasting is limited to the row-wise case: an operand may match the
trailing dimensions of the other (a bias row added to every token, say).
Anything wider must go through `broadcast_to` explicitly.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from ..errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

Operand = Union["Tensor", np.ndarray, float, int]
Pullback = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording pullbacks (read-only inference)."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A float array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_pullback", "_op")

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[float]],
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[np.dtype] = None,
    ):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float64
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._pullback: Optional[Pullback] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._pullback is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)


def parameter(data: np.ndarray, name: str) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value: Operand, dtype: Optional[np.dtype] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], pullback: Pullback, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._pullback = pullback
        out._op = op
    return out


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def _check_rowwise(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long = (a, b) if len(a) < len(b) else (b, a)
    if long[len(long) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} are not row-wise compatible")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a cotangent back down to an operand shape (leading and size-1 axes)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b)
    _check_rowwise("add", ta.shape, tb.shape)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, ta.shape), _reduce_to(g, tb.shape)

    return _make(ta.data + tb.data, (ta, tb), pullback, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b)
    _check_rowwise("sub", ta.shape, tb.shape)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g, ta.shape), -_reduce_to(g, tb.shape)

    return _make(ta.data - tb.data, (ta, tb), pullback, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b)
    _check_rowwise("mul", ta.shape, tb.shape)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _reduce_to(g * tb.data, ta.shape), _reduce_to(g * ta.data, tb.shape)

    return _make(ta.data * tb.data, (ta, tb), pullback, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * factor,)

    return _make(a.data * a.data.dtype.type(factor), (a,), pullback, "scale")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def matmul(a: Operand, b: Operand) -> Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m)."""
    ta, tb = _pair(a, b)
    if ta.ndim < 2 or tb.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {ta.shape} and {tb.shape}")
    if ta.shape[-1] != tb.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ in {ta.shape} @ {tb.shape}")
    if tb.ndim > 2 and tb.shape[:-2] != ta.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ in {ta.shape} @ {tb.shape}")

    def pullback(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = np.matmul(g, np.swapaxes(tb.data, -1, -2))
        if tb.ndim == 2:
            k, m = tb.shape
            gb = ta.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
        return ga, gb

    return _make(np.matmul(ta.data, tb.data), (ta, tb), pullback, "matmul")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; swaps the last two by default."""
    if axes is None:
        axes = list(range(a.ndim))
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 dimensions")
        axes[-1], axes[-2] = axes[-2], axes[-1]
    perm = tuple(axes)
    inverse = tuple(np.argsort(perm))

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, perm), (a,), pullback, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g.reshape(a.shape),)

    return _make(out, (a,), pullback, "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the pullback sums over the expanded axes."""
    target = tuple(shape)
    try:
        out = np.broadcast_to(a.data, target).copy()
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} to {target}") from e

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (_reduce_to(g, a.shape),)

    return _make(out, (a,), pullback, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one operand")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def pullback(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), pullback, "concat")


def take(a: Tensor, index: Tuple[slice, ...]) -> Tensor:
    """Basic slicing (no fancy indexing)."""
    out = a.data[index]

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(np.array(out), (a,), pullback, "slice")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out,)

    return _make(out, (a,), pullback, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericalError("log of a non-positive value")

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g / a.data,)

    return _make(np.log(a.data), (a,), pullback, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * (1.0 - out * out),)

    return _make(out, (a,), pullback, "tanh")


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * positive,)

    return _make(np.where(positive, a.data, 0).astype(a.dtype), (a,), pullback, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * out * (1.0 - out),)

    return _make(out, (a,), pullback, "sigmoid")


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (g * inside,)

    return _make(np.clip(a.data, low, high), (a,), pullback, "clip")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), pullback, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean and unit variance."""
    n = a.shape[-1]
    mean = a.data.mean(axis=-1, keepdims=True)
    centred = a.data - mean
    var = (centred * centred).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_std = 1.0 / np.sqrt(var + eps)
    out = centred * inv_std

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        g_sum = g.sum(axis=-1, keepdims=True)
        gx_sum = (g * out).sum(axis=-1, keepdims=True)
        return (inv_std * (g - g_sum / n - out * gx_sum / n),)

    return _make(out, (a,), pullback, "layer_norm")


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def pullback(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), pullback, "sum")


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """Stable log-sum-exp composed from primitives (the shift is a constant)."""
    peak = a.data.max(axis=axis, keepdims=True)
    shift = Tensor(np.broadcast_to(peak, a.shape).copy(), dtype=a.dtype)
    total = sum(exp(sub(a, shift)), axis=axis)
    return add(log(total), Tensor(np.squeeze(peak, axis=axis), dtype=a.dtype))


class Tape:
    """Ordered record of the operations reachable from one scalar root.

    Nodes are stored parents-first, so the reverse walk in `run` sees every
    consumer of a node before the node itself and visits each exactly once.
    """

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, root: Tensor) -> None:
        cotangents: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node._pullback is None:
                node.grad = np.array(g, dtype=node.dtype)
                continue
            for parent, pg in zip(node._parents, node._pullback(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                cotangents[key] = cotangents[key] + pg if key in cotangents else pg


def backward(root: Tensor) -> Tape:
    """Reverse-mode gradients of a scalar; leaves receive `.grad` (overwritten)."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ShapeError("backward root does not depend on any trainable leaf")
    tape = Tape.record(root)
    tape.run(root)
    return tape
