"""Dense float32 tensors with a reverse-mode differentiation tape.

Every differentiable operation appends a node to an implicit tape that is
ordered by a monotonically increasing node id. :func:`backward` walks the
nodes reachable from a scalar loss in strictly decreasing id order, so the
accumulation order of gradients is fixed and runs are bit-reproducible.

Only the primitives the weight-field model needs are provided; broadcasting
follows numpy rules and gradients are summed back over broadcast axes.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_local = threading.local()
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _ctx():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.counter = itertools.count()
        _local.dtype = np.float32
    return _local


def is_grad_enabled() -> bool:
    return _ctx().grad_enabled


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


@contextmanager
def float64_mode():
    """Create new tensors in float64.

    Verification only: finite-difference checks at a 1e-4 relative
    tolerance are below float32 round-off for step 1e-3.
    """
    ctx = _ctx()
    prev = ctx.dtype
    ctx.dtype = np.float64
    try:
        yield
    finally:
        ctx.dtype = prev


def default_dtype():
    return _ctx().dtype


class Tensor:
    """An n-dimensional real array that can sit on the tape."""

    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        t._node = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return activation(self, "tanh")

    def sigmoid(self):
        return activation(self, "sigmoid")


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=default_dtype()))


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    t = Tensor._wrap(out)
    ctx = _ctx()
    if ctx.grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        t._node = next(ctx.counter)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
    nodes.sort(key=lambda t: t._node, reverse=True)

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p.grad = pg.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + pg
            else:
                key = id(p)
                pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0, not inf."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype),)

    return _record(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def activation(x, kind: str) -> Tensor:
    """Elementwise ``gelu`` (exact erf form), ``silu``, ``tanh`` or ``sigmoid``."""
    x = as_tensor(x)
    d = x.data
    if kind == "gelu":
        cdf = 0.5 * (1 + erf(d / _SQRT2))
        out = (d * cdf).astype(d.dtype)

        def bw(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
            return ((g * (cdf + d * pdf)).astype(d.dtype),)

    elif kind == "silu":
        sig = 1 / (1 + np.exp(-d))
        out = d * sig

        def bw(g):
            return (g * sig * (1 + d * (1 - sig)),)

    elif kind == "tanh":
        out = np.tanh(d)

        def bw(g):
            return (g * (1 - out * out),)

    elif kind == "sigmoid":
        out = np.exp(-np.logaddexp(0, -d)).astype(d.dtype)

        def bw(g):
            return (g * out * (1 - out),)

    else:
        raise ContractError(f"unknown activation {kind!r}")
    return _record(out, (x,), bw)


def gelu(x) -> Tensor:
    return activation(x, "gelu")


def silu(x) -> Tensor:
    return activation(x, "silu")


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


# ---------------------------------------------------------------------------
# shape manipulation and indexing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record(a.data[idx], (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows along axis 0 (embedding lookup, adapter-bank gather)."""
    if axis != 0:
        raise ContractError("take only supports axis=0")
    a = as_tensor(a)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise ContractError(f"take: index out of range for extent {a.shape[0]}")

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, indices, g)
        return (z,)

    return _record(a.data[indices], (a,), bw)


def take_along(a, indices: np.ndarray, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    out = np.take_along_axis(a.data, indices, axis)

    def bw(g):
        z = np.zeros_like(a.data)
        grid = list(np.indices(indices.shape, sparse=True))
        grid[axis] = indices
        np.add.at(z, tuple(grid), g)
        return (z,)

    return _record(out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes.

    Leading (batch) extents must be equal or 1.
    """
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    ok = a.ndim >= 2 and b.ndim >= 2 and sa[-1] == sb[-2]
    if ok:
        for x, y in zip(reversed(sa[:-2]), reversed(sb[:-2])):
            if x != y and x != 1 and y != 1:
                ok = False
                break
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {sa} and {sb}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then affine."""
    x = as_tensor(x)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=lead) if bias.requires_grad else None)
        return tuple(grads)

    return _record(out, parents, bw)


def rms_norm(x, gain=None, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x = as_tensor(x)
    d = x.data
    inv = 1 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + eps)
    xhat = d * inv
    parents = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        out = xhat * gain.data
        parents.append(gain)
    lead = tuple(range(d.ndim - 1))

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain is None:
            return (dx,)
        return dx, ((g * xhat).sum(axis=lead) if gain.requires_grad else None)

    return _record(out, parents, bw)


def cross_entropy_nll(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is set.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` share the leading shape.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy_nll: logits {logits.shape} vs targets {targets.shape}")
    m = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ContractError("cross_entropy_nll: mask selects no positions")
    if (targets[m] < 0).any() or (targets[m] >= V).any():
        raise ContractError(f"cross_entropy_nll: target outside [0, {V})")
    safe_t = np.where(m, targets, 0)
    d = logits.data
    mx = d.max(axis=-1, keepdims=True)
    e = np.exp(d - mx)
    se = e.sum(axis=-1, keepdims=True)
    lse = (np.log(se) + mx)[..., 0]
    picked = np.take_along_axis(d, safe_t[..., None], -1)[..., 0]
    nll = (lse - picked) * m
    dt = d.dtype
    out = np.asarray(nll.sum() / count, dtype=dt)

    def bw(g):
        p = e / se
        grid = list(np.indices(safe_t.shape, sparse=True)) + [safe_t]
        p[tuple(grid)] -= 1
        return ((p * (m[..., None] * (g / count))).astype(dt),)

    return _record(out, (logits,), bw)


def mean_pool(x, mask=None) -> Tensor:
    """Average ``[B, T, D]`` over T, optionally only over positions in ``mask``."""
    x = as_tensor(x)
    B, T = x.shape[0], x.shape[1]
    if T < 1:
        raise ContractError("mean_pool needs T >= 1")
    if mask is None:
        w = np.full((B, T), 1.0 / T, dtype=x.data.dtype)
    else:
        m = np.asarray(mask, dtype=x.data.dtype)
        cnt = m.sum(axis=1, keepdims=True)
        if (cnt == 0).any():
            raise ContractError("mean_pool: a row has no unmasked positions")
        w = m / cnt
    w3 = w[:, :, None]
    return _record((x.data * w3).sum(axis=1), (x,), lambda g: (g[:, None, :] * w3,))


def top_k(x, k: int):
    """Return ``(values, indices)`` of the k largest entries of the last axis.

    Ties go to the lower index; indices are in descending-value order.
    Gradient flows only through ``values``.
    """
    x = as_tensor(x)
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"top_k: k={k} outside [1, {n}]")
    idx = np.argsort(-x.data, axis=-1, kind="stable")[..., :k]
    return take_along(x, idx, -1), idx
