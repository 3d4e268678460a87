"""Dense float64 tensors with tape-style reverse-mode differentiation.

Every forward op records a node holding its parents and a closure that maps
the output gradient to parent gradients. Nodes receive increasing ids at
creation, so creation order is a valid topological order; ``backward`` replays
the reachable part of the tape in reverse id order, visiting each node once.

Every op output is checked for NaN/Inf and raises ``NumericalError`` instead
of propagating silently.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericalError, ParameterError, UsageError

_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording; outputs never require grad."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "uid", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.uid = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t.uid = next(_ids)
    t._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"{op}: shapes {' and '.join(map(str, shapes))} are not broadcastable") from None


# --- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a.shape, b.shape)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a.shape, b.shape)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a.shape, b.shape)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be nonnegative")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (the BERT variant)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _node(out, (a,), backward, "gelu")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _node(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


# --- linear algebra & reductions -------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward, "matmul")


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _node(np.asarray(out), (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _node(np.asarray(out), (a,), backward, "mean")


def dot(a, b) -> Tensor:
    """Inner product along the last axis."""
    return tsum(mul(a, b), axis=-1)


# --- shape ops ---------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(a, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (a,), backward, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(out, ts, backward, "stack")


# --- normalisation / probability ---------------------------------------------


def _check_tau(temperature: float) -> float:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return float(temperature)


def softmax(x, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    tau = _check_tau(temperature)
    z = x.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)) / tau,)

    return _node(out, (x,), backward, "softmax")


def log_softmax(x, temperature: float = 1.0, mask=None) -> Tensor:
    """Log-softmax over the last axis, restricted to entries where ``mask`` is true.

    Masked-out entries are excluded from the normaliser and come back as 0
    with zero gradient.
    """
    x = as_tensor(x)
    tau = _check_tau(temperature)
    keep = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(keep.any(axis=-1)):
        raise UsageError("log_softmax: a row has every entry masked out")
    z = x.data / tau
    zmax = np.max(np.where(keep, z, -np.inf), axis=-1, keepdims=True)
    shifted = np.where(keep, z - zmax, 0.0)
    e = np.where(keep, np.exp(shifted), 0.0)
    lse = np.log(e.sum(axis=-1, keepdims=True))
    out = np.where(keep, shifted - lse, 0.0)

    def backward(g):
        gk = np.where(keep, g, 0.0)
        p = np.where(keep, np.exp(out), 0.0)
        return ((gk - p * gk.sum(axis=-1, keepdims=True)) / tau,)

    return _node(out, (x,), backward, "log_softmax")


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DomainError("l2_normalize: zero-norm vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _node(out, (x,), backward, "l2_normalize")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (x, gain, bias), backward, "layer_norm")


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity (same object) when not training or rate == 0."""
    x = as_tensor(x)
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise UsageError("dropout in train mode needs an rng")
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


def masked_mean(x, index_sets: Sequence[Sequence[int]]) -> Tensor:
    """Row ``b`` of the output is ``x[b, index_sets[b]].mean(axis=0)`` for x of shape (B, T, D)."""
    x = as_tensor(x)
    if x.ndim != 3 or len(index_sets) != x.shape[0]:
        raise DimensionError(f"masked_mean: expected (B, T, D) with B={len(index_sets)}, got {x.shape}")
    idx = [np.asarray(ix, dtype=np.intp) for ix in index_sets]
    if any(ix.size == 0 for ix in idx):
        raise UsageError("masked_mean: empty index set")
    out = np.stack([x.data[b, ix].mean(axis=0) for b, ix in enumerate(idx)])

    def backward(g):
        full = np.zeros_like(x.data)
        for b, ix in enumerate(idx):
            full[b, ix] += g[b] / ix.size
        return (full,)

    return _node(out, (x,), backward, "masked_mean")


# --- reverse pass --------------------------------------------------------------


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every reachable leaf with requires_grad.

    Returns a map from leaf ``uid`` to gradient array and also stores each
    gradient on ``leaf.grad``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    seen: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node.uid in seen:
            continue
        seen[node.uid] = node
        stack_.extend(p for p in node._parents if p.requires_grad and p.uid not in seen)

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for uid in sorted(seen, reverse=True):
        node = seen[uid]
        g = grads.pop(uid, None)
        if g is None:
            continue
        if node._backward is None:
            leaves[uid] = g
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.uid in grads:
                grads[parent.uid] = grads[parent.uid] + pg
            else:
                grads[parent.uid] = np.array(pg, dtype=np.float64)
    return leaves


def gradcheck(fn: Callable[[], Tensor], params: Iterable[Tensor] | Mapping[str, Tensor],
              step: float = 1e-4, rtol: float = 1e-4, atol: float = 1e-6,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> list[str]:
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` is re-evaluated with each parameter entry nudged by ±step. An entry
    passes if its relative error is within ``rtol`` or its absolute error within
    ``atol``. Returns a list of failure descriptions (empty means pass).
    When ``max_entries`` is set, that many entries per parameter are sampled.
    """
    named = list(params.items()) if isinstance(params, Mapping) else [(p.name or f"p{i}", p) for i, p in enumerate(params)]
    loss = fn()
    grads = backward(loss)
    failures = []
    for name, p in named:
        analytic = grads.get(p.uid, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = fn().item()
            flat[i] = orig - step
            with no_grad():
                down = fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric)
            rel = err / max(abs(a), abs(numeric), 1e-300)
            if err > atol and rel > rtol:
                failures.append(f"{name}[{i}]: analytic={a:.10g} numeric={numeric:.10g} rel={rel:.3g}")
    return failures
