"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations needed by the projector, the prompt generator and the
frozen decoder are provided. Everything runs in float64.

A ``Tensor`` records its parents and a closure that pushes the upstream
gradient to them. ``backward`` walks the graph in reverse topological order.
``Parameter`` is a named leaf that can be frozen; frozen parameters behave as
constants and their storage becomes read-only.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .exceptions import FrozenParameterError, MissingGradientError, ShapeError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("_data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self._data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self):
        return self._data.shape

    @property
    def ndim(self):
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        return self._data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return permute(self, axes)


class Parameter(Tensor):
    """Named trainable leaf. ``freeze()`` makes it a read-only constant."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.frozen = False

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        if self.frozen:
            raise FrozenParameterError(f"parameter {self.name!r} is frozen")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data.shape:
            raise ShapeError(f"{self.name}: expected shape {self._data.shape}, got {value.shape}")
        self._data = value.copy()

    def freeze(self):
        self.frozen = True
        self.requires_grad = False
        self.grad = None
        self._data.setflags(write=False)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _acc(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
        _acc(x, g * (cdf + x.data * pdf))

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(a.shape)))


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: _acc(a, np.transpose(g, inv)))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------- reductions


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least two dimensions")

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            _acc(weight, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if bias is not None and bias.requires_grad:
            _acc(bias, g2.sum(axis=0))

    return _make(out, parents, bw)


# ---------------------------------------------------------------- normalisation / probabilities


def masked_softmax(scores, mask=None) -> Tensor:
    """Softmax over the last axis. Masked-out entries get weight exactly 0.

    ``mask`` is a boolean array broadcastable to ``scores`` (True = keep).
    Rows with no valid entry produce all-zero weights.
    """
    scores = as_tensor(scores)
    s = scores.data
    if mask is None:
        m = s.max(axis=-1, keepdims=True)
        e = np.exp(s - m)
    else:
        mask = np.broadcast_to(mask, s.shape)
        m = np.where(mask, s, -np.inf).max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, s - m, 0.0)), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    p = e / np.where(z > 0, z, 1.0)

    def bw(g):
        _acc(scores, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _make(p, (scores,), bw)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        _acc(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _acc(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _acc(beta, _unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            n = x.shape[-1]
            _acc(
                x,
                inv
                / n
                * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True)),
            )

    return _make(out, (x, gamma, beta), bw)


def pick(x, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index]`` along the last axis (index has x.shape[:-1])."""
    x = as_tensor(x)
    index = np.asarray(index)
    idx = np.expand_dims(index, -1)
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, -1), axis=-1)
        _acc(x, full)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- graph traversal


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns ``{name: gradient}`` for every unfrozen Parameter reached. When
    ``params`` is given, each of them must be reached; otherwise the graph is
    considered detached.
    """
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise MissingGradientError("loss does not depend on any trainable parameter")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    grads: dict[str, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # free intermediates
        elif isinstance(node, Parameter) and node.grad is not None:
            grads[node.name] = node.grad
    if params is not None:
        missing = [p.name for p in params if not p.frozen and p.name not in grads]
        if missing:
            raise MissingGradientError(f"no gradient reached: {', '.join(missing)}")
    return grads


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.grad = None
