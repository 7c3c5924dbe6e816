"""Dense tensors with a reverse-mode gradient tape.

Every primitive computes its forward value with numpy, checks it for
NaN/Inf, tallies its FLOPs into any active :class:`FlopCounter` and, when a
:class:`Tape` is active and an input requires a gradient, records a
vector-Jacobian closure. :func:`backward` replays those closures in reverse
record order.

Broadcasting is limited to leading axes: an operand of shape ``s`` may be
combined with one of shape ``(*lead, *s)``. Anything else needs an explicit
reshape or :func:`broadcast_leading`.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NonFiniteError, StateError

# FLOPs charged per output scalar for the non-matmul primitives. Matrix
# products are charged 2*p*q*r (multiplies and accumulates counted apart).
FLOPS_PER_ELEMENT = {
    "add": 1,
    "mul": 1,
    "scale": 1,
    "sum": 1,
    "mean": 1,
    "softmax": 5,
    "layer_norm": 8,
    "gelu": 8,
}

DEFAULT_EPS = 1e-5

_tapes: list["Tape"] = []
_counters: list["FlopCounter"] = []
_deterministic = False
_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def set_deterministic(flag: bool) -> None:
    """Accumulate float32 reductions in float64 before rounding back.

    Reductions over an axis whose order changes (e.g. permuted input rows)
    then round to the same float32 value almost always.
    """
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


@contextmanager
def deterministic(flag: bool = True):
    prev = _deterministic
    set_deterministic(flag)
    try:
        yield
    finally:
        set_deterministic(prev)


class Tensor:
    """An n-dimensional float array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype.type if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.is_leaf = True

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of primitive executions.

    Use as a context manager around a forward pass, then hand it to
    :func:`backward` once.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise StateError("tape already consumed")
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.entries)


class FlopCounter:
    """Tallies the FLOPs of every primitive executed while active."""

    def __init__(self):
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.total += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)

    def __enter__(self):
        _counters.append(self)
        return self

    def __exit__(self, *exc):
        _counters.remove(self)
        return False


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp, flops: int) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    for c in _counters:
        c.add(kind, flops)
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad, dtype=out.dtype.type)
    result.is_leaf = False
    if needs_grad and _tapes:
        _tapes[-1].entries.append((result, tuple(inputs), vjp))
    return result


def _acc64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64) if (_deterministic and x.dtype == np.float32) else x


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _deterministic and a.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return a @ b


def _rsum(x: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    return _acc64(x).sum(axis=axis, keepdims=keepdims).astype(x.dtype)


def _sum_leading(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = _rsum(g, tuple(range(extra)))
    return g


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"{op}: shape {b.shape} does not match trailing axes of {a.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may omit leading axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_trailing(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return g, _sum_leading(g, b.shape)

    return _emit("add", out, (a, b), vjp, out.size * FLOPS_PER_ELEMENT["add"])


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may omit leading axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_trailing(a, b, "mul")
    av, bv = a.data, b.data
    out = av * bv

    def vjp(g):
        return g * bv, _sum_leading(g * av, b.shape)

    return _emit("mul", out, (a, b), vjp, out.size * FLOPS_PER_ELEMENT["mul"])


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * a.dtype.type(s)
    return _emit("scale", out, (a,), lambda g: (g * s,), out.size * FLOPS_PER_ELEMENT["scale"])


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(_acc64(a.data).sum(), dtype=a.dtype)
    shape = a.shape
    return _emit("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),), a.size * FLOPS_PER_ELEMENT["sum"])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., p, q) @ (..., q, r)``.

    ``b`` is either 2-D (shared across the batch) or has exactly the batch
    axes of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner axes differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    out = _mm(av, bv)
    q, r = bv.shape[-2], bv.shape[-1]
    flops = 2 * (av.size // q) * q * r

    def vjp(g):
        ga = _mm(g, np.swapaxes(bv, -1, -2))
        if bv.ndim == 2:
            gb = _mm(av.reshape(-1, q).T, g.reshape(-1, r))
        else:
            gb = _mm(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp, flops)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis, tiled over every other axis."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} vs weight {w.shape}")
    cin, cout = w.shape
    xv = x.data
    x2 = xv.reshape(-1, cin)
    y = _mm(x2, w.data)
    rows = x2.shape[0]
    flops = 2 * rows * cin * cout
    if b is not None:
        y = y + b.data
        flops += rows * cout
    out = y.reshape(*xv.shape[:-1], cout)
    wv = w.data

    def vjp(g):
        g2 = g.reshape(-1, cout)
        grads = [_mm(g2, wv.T).reshape(xv.shape), _mm(x2.T, g2)]
        if b is not None:
            grads.append(_rsum(g2, 0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, vjp, flops)


def softmax_last_axis(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    xv = x.data
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    s = _acc64(e).sum(axis=-1, keepdims=True)
    out = (e / s).astype(xv.dtype)

    def vjp(g):
        return (out * (g - _rsum(g * out, -1, keepdims=True)),)

    return _emit("softmax", out, (x,), vjp, out.size * FLOPS_PER_ELEMENT["softmax"])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    x = as_tensor(x)
    c = x.shape[-1] if x.ndim else 0
    if c < 1 or gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.data
    out = xhat * gv + bias.data

    def vjp(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_leading(g * xhat, (c,)), _sum_leading(g, (c,))

    return _emit("layer_norm", out.astype(xv.dtype), (x, gain, bias), vjp,
                 out.size * FLOPS_PER_ELEMENT["layer_norm"])


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xv = x.data
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))
    out = (xv * cdf).astype(xv.dtype)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return _emit("gelu", out, (x,), vjp, out.size * FLOPS_PER_ELEMENT["gelu"])


def mean_over_index(x: Tensor) -> Tensor:
    """Average over the index axis (second to last): ``(..., N, C) -> (..., C)``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"mean_over_index needs (..., N, C), got {x.shape}")
    n = x.shape[-2]
    if n == 0:
        raise DimensionError("mean over an empty index axis")
    out = (_acc64(x.data).sum(axis=-2) / n).astype(x.dtype)
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, -2), shape).copy(),)

    return _emit("mean", out, (x,), vjp, x.size * FLOPS_PER_ELEMENT["mean"])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    src = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),), 0)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", out, (x,), lambda g: (g.transpose(inv),), 0)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), vjp, 0)


def broadcast_leading(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Tile ``x`` along new leading axes ``lead``."""
    x = as_tensor(x)
    lead = tuple(int(n) for n in lead)
    if not lead:
        return x
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    shape = x.shape
    return _emit("broadcast", out, (x,), lambda g: (_sum_leading(g, shape),), 0)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy over all leading axes."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    k = logits.shape[-1]
    if t.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {t.shape} vs logits {logits.shape}")
    if not np.issubdtype(t.dtype, np.integer) or t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError("targets must be class indices in [0, num_classes)")
    z = logits.data.reshape(-1, k)
    tf = t.reshape(-1)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    n = z.shape[0]
    out = np.asarray((lse - z[np.arange(n), tf]).mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), tf] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _emit("cross_entropy", out, (logits,), vjp, 0)


def sigmoid_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Multi-label loss: summed over classes, averaged over leading axes."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("sigmoid targets must be 0 or 1")
    z = logits.data
    n = max(z.size // z.shape[-1], 1) if z.ndim else 1
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.sum() / n, dtype=logits.dtype)

    def vjp(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (sig - t) / n,)

    return _emit("sigmoid_cross_entropy", out, (logits,), vjp, 0)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate dLoss/dLeaf into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise StateError("tape already consumed")
    if _tapes and tape in _tapes:
        raise StateError("backward called inside the tape context")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.is_leaf:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.entries.clear()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
