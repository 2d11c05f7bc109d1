"""Dense tensors with a small reverse-mode autodiff tape.

Every primitive computes its forward result with numpy, checks it for
NaN/Inf, and (when a :class:`Tape` is active and an input requires grad)
records a vector-Jacobian closure.  ``Tape.backward`` replays the closures
in exact reverse execution order and accumulates gradients additively.

Training runs in float32; :func:`precision` switches newly created tensors
to float64 for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

LN_EPS = 1e-5

_DTYPES = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_tapes: list["Tape"] = []


class NonFiniteError(FloatingPointError):
    """Raised as soon as a primitive produces NaN or Inf."""


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors."""
    global _dtype
    prev = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = prev


class Tensor:
    """Row-major real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=dtype or _dtype))
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.data.dtype))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NonFiniteError(f"{op}: {bad} non-finite value(s) in output of shape {arr.shape}")


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the block are
    recorded if any of their inputs requires grad.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        loss.grad = grad if loss.grad is None else loss.grad + grad
        for node in reversed(self.nodes):
            g_out = node.out.grad
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g

    def visit_order(self) -> list[str]:
        """Op names in the order backward visits them."""
        return [n.op for n in reversed(self.nodes)]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(op, out)
    t = Tensor._wrap(out)
    if _tapes and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        _tapes[-1].nodes.append(_Node(op, t, inputs, vjp))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, stacked operands, or stacked @ 2-D."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad * bd
    return _emit(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    k = x.dtype.type(math.sqrt(2.0 / math.pi))
    c = x.dtype.type(0.044715)
    u = k * (x + c * (x * x * x))
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        du = k * (1.0 + 3.0 * c * (x * x))
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _emit("gelu", out.astype(x.dtype, copy=False), (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    xd = x.data
    c = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, c)
        ggain = (flat_g * xhat.reshape(-1, c)).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        return gx, ggain, gbias

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def row_softmax(x: Tensor) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("row_softmax", p, (x,), vjp)


def row_log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("row_log_softmax", out, (x,), vjp)


def causal_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of ``[..., T, T]`` with entries above the diagonal masked out."""
    t = x.shape[-1]
    if x.shape[-2] != t:
        raise ValueError(f"causal_softmax expects square trailing dims, got {x.shape}")
    keep = np.tril(np.ones((t, t), dtype=bool))
    z = np.where(keep, x.data, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("causal_softmax", p, (x,), vjp)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: output row i is ``table[ids[i]]`` (ids may be any int array)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("gather_rows", out, (table,), vjp)


def pick(x: Tensor, idx) -> Tensor:
    """``out[...] = x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ValueError(f"pick index shape {idx.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _emit("pick", out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", out, (x,), lambda g: (g.transpose(inv),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(x.data[..., start:stop])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _emit("slice_last", out, (x,), vjp)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", out, (x,), vjp)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())
    return _emit("mean", out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def masked_mean_value(values: np.ndarray, mask: np.ndarray):
    """Mean of ``values`` at ``mask`` positions, in the dtype of ``values``.

    This is the single summation routine shared by the shaped loss and the
    CVaR tail mean, so the two agree bit-for-bit.  The sum is correctly
    rounded (``math.fsum``), so the result does not depend on element order.
    """
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("masked mean over an empty selection")
    total = math.fsum(values[mask].astype(np.float64).tolist())
    return values.dtype.type(total / count)


def masked_mean(x: Tensor, mask) -> Tensor:
    """Mean over selected entries; unselected entries get an exactly zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape}")
    count = int(np.count_nonzero(mask))
    out = np.asarray(masked_mean_value(x.data, mask))

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[mask] = g / x.data.dtype.type(count)
        return (gx,)

    return _emit("masked_mean", out, (x,), vjp)


def weighted_mean(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * w) / sum(w)`` with constant weights."""
    w = np.asarray(weights, dtype=x.data.dtype)
    total = w.sum()
    out = np.asarray((x.data * w).sum() / total)
    return _emit("weighted_mean", out, (x,), lambda g: (g * w / total,))


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` receives them as
    positional arguments and must return a single-element Tensor.  Run it
    under ``precision("float64")``.  Per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps round-off in the
    difference quotient from dominating coordinates whose true gradient is
    near zero.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in xs]
    with Tape() as tape:
        y = f(*leaves)
    tape.backward(y)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]

    probes = [Tensor(t.data.copy()) for t in xs]
    worst = 0.0
    with no_grad():
        for probe, a in zip(probes, analytic):
            flat = probe.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*probes).item()
                flat[i] = orig - h
                fm = f(*probes).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
                worst = max(worst, float(err))
    return worst
