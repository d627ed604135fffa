"""Dense float64 tensors with a small reverse-mode autodiff tape.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean(relu(matmul(x, w)))
    tape.backward(loss)
    w.grad  # ndarray shaped like w

Operations record themselves on the innermost active :class:`Tape`, and only
when at least one input is trainable or itself produced on a tape.
"""
from __future__ import annotations

import collections
import logging
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-12
LOG_CLAMP = 1e-300

# incremented whenever log() clamps a vanishing input
clamp_events: collections.Counter = collections.Counter()

_active_tapes: list["Tape"] = []


class Tensor:
    """Immutable-by-convention float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in creation order, which is a topological order, so
    the backward pass is a single reversed sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gin in zip(node.inputs, node.backward(g)):
                if gin is None or not inp._tracked:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gin if key in grads else gin
                if inp.requires_grad:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is not None:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tracked = False
    if _active_tapes and any(t._tracked for t in inputs):
        out._tracked = True
        _active_tapes[-1].nodes.append(_Node(out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), backward, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def _normalize_last(x: Tensor) -> Tensor:
    v = x.data
    # scale by the largest entry first so the sum of squares cannot overflow
    peak = np.max(np.abs(v), axis=-1, keepdims=True)
    peak = np.where(peak > 0, peak, 1.0)
    norm = peak * np.sqrt(np.sum((v / peak) ** 2, axis=-1, keepdims=True))
    denom = norm + EPS
    data = v / denom

    def backward(g):
        unit = v / np.where(norm > 0, norm, 1.0)
        coef = np.sum(unit * g, axis=-1, keepdims=True) / denom
        return (g / denom - data * coef,)

    return _make(data, (x,), backward, "l2_normalize")


def l2_normalize(v) -> Tensor:
    """Return ``v / (||v|| + 1e-12)`` for a rank-1 tensor."""
    v = as_tensor(v)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeError(f"l2_normalize expects a non-empty rank-1 tensor, got {v.shape}")
    return _normalize_last(v)


def normalize_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows expects rank 2, got {x.shape}")
    return _normalize_last(x)


def pairwise_distance(a, b) -> Tensor:
    """Euclidean distances between rows of ``a`` (B x F) and rows of ``b`` (N x F)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))

    def backward(g):
        # subgradient 0 where the two points coincide
        w = np.divide(g, dist, out=np.zeros_like(dist), where=dist > 0)
        contrib = w[:, :, None] * diff
        return contrib.sum(axis=1), -contrib.sum(axis=0)

    return _make(dist, (a, b), backward, "pairwise_distance")


def softmax(x, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * x`` along the last axis, max-subtracted."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax needs at least one element along the last axis")
    z = scale * x.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (scale * p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def log(x) -> Tensor:
    """Natural log with inputs below 1e-300 clamped (and counted)."""
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("log of a negative value")
    low = x.data < LOG_CLAMP
    if low.any():
        n = int(low.sum())
        clamp_events["log"] += n
        logger.warning("log: clamped %d value(s) to %g", n, LOG_CLAMP)
    safe = np.maximum(x.data, LOG_CLAMP)
    return _make(np.log(safe), (x,), lambda g: (np.where(low, 0.0, g / safe),), "log")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(data), (x,), backward, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def max(x, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum; the gradient flows to the first maximizing entry."""
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("max of an empty tensor")
    if axis is None:
        idx = int(np.argmax(x.data))
        data = np.asarray(x.data.flat[idx])

        def backward(g):
            out = np.zeros(x.data.size)
            out[idx] = g
            return (out.reshape(x.shape),)

        return _make(data, (x,), backward, "max")
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    data = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(data, (x,), backward, "max")


# -- composites --------------------------------------------------------------

def stable_softmax(z, scale: float = 1.0) -> Tensor:
    """Softmax of ``scale * z``; safe for inputs of any magnitude."""
    z = as_tensor(z)
    if z.data.size == 0:
        raise ShapeError("stable_softmax of an empty tensor")
    return softmax(z, scale)


def finite_diff_gradient(f: Callable[[Tensor], float], x, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = as_tensor(x).data
    grad = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp = float(f(Tensor(plus.reshape(base.shape))))
        fm = float(f(Tensor(minus.reshape(base.shape))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near index {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad.reshape(base.shape))
