"""Small dense tensor library with reverse-mode automatic differentiation.

Everything is float64. Each op builds its output eagerly and, when any input
requires a gradient, records a closure mapping the output gradient to one
gradient per parent. ``Tensor.backward`` walks the recorded graph once in
reverse topological order.

Graph-structured ops (``take_rows``, ``segment_sum``, ``segment_softmax``)
work on edge lists over dense node matrices; segment reductions go through a
sparse indicator matrix so they stay deterministic and fast.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import InvalidAxis, NonFiniteValue, NonScalarLoss, ShapeMismatch

__all__ = [
    "Tensor", "no_grad", "grad_enabled", "as_tensor",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "concat", "stack",
    "reshape", "transpose", "take_rows", "sum", "mean", "exp", "log", "tanh",
    "sigmoid", "relu", "elu", "leaky_relu", "softmax", "log_softmax",
    "np_softmax", "np_log_softmax", "dropout", "segment_sum",
    "segment_softmax", "grad_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic attributes ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators -------------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __pow__(self, k): return power(self, k)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, idx): return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self): return transpose(self)

    # -- differentiation -------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable leaf t.

        Intermediate results do not keep gradients.
        """
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar, got shape {self.shape}")
        order = _topological(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _raise_scalar():
    raise ValueError("item() needs a single-element tensor")


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))
    return _result(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, k: float) -> Tensor:
    """Elementwise ``a ** k`` for a constant exponent."""
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad ** k

    def back(g):
        if k == 0:
            return (np.zeros_like(ad),)
        if k == 1:
            return (g,)
        return (g * k * ad ** (k - 1),)
    return _result(out, (a,), back, "pow")


# -- linear algebra and shape ops -----------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        a2 = ad.reshape(1, -1) if ad.ndim == 1 else ad
        b2 = bd.reshape(-1, 1) if bd.ndim == 1 else bd
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return ((g2 @ b2.T).reshape(ad.shape), (a2.T @ g2).reshape(bd.shape))
    return _result(ad @ bd, (a, b), back, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {src} -> {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is not None and sorted(axes) != list(range(a.ndim)):
        raise InvalidAxis(f"transpose axes {axes} for ndim {a.ndim}")
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat of nothing")
    nd = ts[0].ndim
    if not -nd <= axis < nd:
        raise InvalidAxis(f"concat axis {axis} for ndim {nd}")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def _getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    out = a.data[idx]
    advanced = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx))

    def back(g):
        full = np.zeros(src)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)
    return _result(np.array(out, dtype=np.float64), (a,), back, "slice")


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]``; backward scatters with summation."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeMismatch(f"take_rows: index out of range for {n} rows")

    def back(g):
        scattered = _segment_matrix(index, n) @ g.reshape(g.shape[0], -1)
        return (np.asarray(scattered).reshape((n,) + g.shape[1:]),)
    return _result(a.data[index], (a,), back, "take_rows")


# -- reductions ------------------------------------------------------------------

def _norm_axis(axis, nd):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -nd <= ax < nd:
            raise InvalidAxis(f"axis {ax} for ndim {nd}")
    return tuple(ax % nd for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)
    return _result(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / count)


# -- pointwise nonlinearities ------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result(out, (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    return _result(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg_part + alpha),), "elu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return _result(x * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def np_log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _norm_axis(axis, a.ndim)
    out = np_softmax(a.data, axis)

    def back(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _result(out, (a,), back, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _norm_axis(axis, a.ndim)
    out = np_log_softmax(a.data, axis)

    def back(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)
    return _result(out, (a,), back, "log_softmax")


def dropout(a, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Exact identity (same object) outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "dropout")


# -- segment (graph) ops -----------------------------------------------------------

def _segment_matrix(segments: np.ndarray, num_segments: int) -> sp.csr_matrix:
    m = segments.shape[0]
    return sp.csr_matrix((np.ones(m), (segments, np.arange(m))), shape=(num_segments, m))


def segment_sum(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id; output has ``num_segments`` rows."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (a.shape[0],):
        raise ShapeMismatch(f"segment ids {segments.shape} for rows {a.shape[0]}")
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise ShapeMismatch("segment id out of range")
    tail = a.shape[1:]
    flat = a.data.reshape(a.shape[0], -1)
    out = np.asarray(_segment_matrix(segments, num_segments) @ flat).reshape((num_segments,) + tail)
    return _result(out, (a,), lambda g: (g[segments],), "segment_sum")


def segment_softmax(a, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of each column of ``a`` taken separately within every segment."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (a.shape[0],):
        raise ShapeMismatch(f"segment ids {segments.shape} for rows {a.shape[0]}")
    x = a.data
    seg_max = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(seg_max, segments, x)
    e = np.exp(x - seg_max[segments])
    mat = _segment_matrix(segments, num_segments)
    flat = e.reshape(e.shape[0], -1)
    denom = np.asarray(mat @ flat).reshape((num_segments,) + x.shape[1:])
    out = e / denom[segments]

    def back(g):
        gy = (g * out).reshape(g.shape[0], -1)
        s = np.asarray(mat @ gy).reshape((num_segments,) + x.shape[1:])
        return (out * (g - s[segments]),)
    return _result(out, (a,), back, "segment_softmax")


# -- verification ------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: np.ndarray | None = None) -> float:
    """Max relative error between autodiff and central finite differences.

    Error per element is |g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-8).
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    x = as_tensor(x)
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if y.requires_grad:
        y.backward()
    g_auto = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).data)
            flat[i] = orig - eps
            lo = float(f(x).data)
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            ga = g_auto[i]
            err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
