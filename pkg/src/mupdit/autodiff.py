"""Dense tensors with a reverse-mode tape.

Every differentiable op records a node on the active :class:`Tape`; the tape is
built in execution order, so replaying it backwards is already a valid
topological order. Broadcasting is deliberately narrow: elementwise ops accept
equal shapes or a scalar operand, and everything else goes through the explicit
:func:`broadcast_to`, whose backward rule is a plain reduction.

Typical use::

    tape = Tape()
    with tape:
        loss = mse(matmul(x, w), y)
    backward(loss, tape)
    w.grad
"""

from __future__ import annotations

import hashlib
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, ShapeError, UsageError

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations.

    Activate with ``with tape:``. A tape supports exactly one backward pass.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def _active_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        tape = _active_tape()
        if tape is not None:
            if tape.consumed:
                raise UsageError("cannot record onto a tape that already ran backward")
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
            tape.nodes.append(out)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not equal and neither is scalar")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if _is_scalar(t) and g.ndim:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# randomness


def sub_seed(seed: int, name: str) -> int:
    """64-bit sub-seed derived from ``(seed, name)`` with BLAKE2b."""
    h = hashlib.blake2b(f"{int(seed)}/{name}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Named random streams: the same ``(seed, name)`` always yields the same samples."""

    def __init__(self, seed: int, name: str = ""):
        self.seed = int(seed)
        self.name = name
        self._gen: np.random.Generator | None = None

    def child(self, name: str) -> "SeededRng":
        full = f"{self.name}/{name}" if self.name else name
        return SeededRng(self.seed, full)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            self._gen = np.random.Generator(np.random.PCG64(sub_seed(self.seed, self.name)))
        return self._gen

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.standard_normal(tuple(shape)).astype(dtype, copy=False)


def init_normal(shape, std: float, rng: SeededRng, dtype=np.float64, name: str | None = None) -> Tensor:
    """Trainable tensor with i.i.d. ``Normal(0, std**2)`` entries (exact zeros for ``std == 0``)."""
    if std < 0 or not math.isfinite(std):
        raise ConfigError(f"init std must be a finite nonnegative number, got {std}")
    if std == 0:
        data = np.zeros(tuple(shape), dtype=dtype)
    else:
        data = (rng.normal(shape, np.float64) * std).astype(dtype, copy=False)
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "add")

    def bw(g):
        _accum(a, _reduce_to(g, a))
        _accum(b, _reduce_to(g, b))

    return _record(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: _accum(a, -g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "sub")

    def bw(g):
        _accum(a, _reduce_to(g, a))
        _accum(b, _reduce_to(-g, b))

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_elementwise(a, b, "mul")

    def bw(g):
        _accum(a, _reduce_to(g * b.data, a))
        _accum(b, _reduce_to(g * a.data, b))

    return _record(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    s = float(s)
    return _record(a.data * s, (a,), lambda g: _accum(a, g * s))


def silu(x: Tensor) -> Tensor:
    sig = expit(x.data)
    out = x.data * sig

    def bw(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _record(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    u = _SQRT_2_OVER_PI * (xd + GELU_COEF * x2 * xd)
    th = np.tanh(u)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x2)
        _accum(x, g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * du))

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# shape ops


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; backward sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from e
    lead = len(shape) - x.data.ndim
    expanded = tuple(i + lead for i, d in enumerate(x.shape) if d == 1 and shape[i + lead] != 1)

    def bw(g):
        r = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            r = r.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        _accum(x, r)

    return _record(np.ascontiguousarray(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {shape}") from e
    return _record(out, (x,), lambda g: _accum(x, g.reshape(old)))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].data.ndim
    for t in xs[1:]:
        if t.data.ndim != xs[0].data.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, xs[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _record(np.concatenate([t.data for t in xs], axis=ax), xs, bw)


def concat_lastdim(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=-1)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.data.ndim
    idx = [slice(None)] * x.data.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return _record(x.data[idx], (x,), bw)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup ``table[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        _accum(table, full)

    return _record(table.data[index], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a (..., m, k)`` with ``b (k, p)`` or ``b (..., k, p)`` (same leading dims)."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if b.data.ndim == 2:
        def bw(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
    else:
        def bw(g):
            if a.requires_grad:
                _accum(a, g @ np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and normalisations


def sum_all(x: Tensor) -> Tensor:
    return _record(np.asarray(x.data.sum()), (x,), lambda g: _accum(x, np.broadcast_to(g, x.shape)))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _record(np.asarray(x.data.mean()), (x,), lambda g: _accum(x, np.broadcast_to(g / n, x.shape)))


def mse(pred: Tensor, target) -> Tensor:
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = (2.0 / n) * g * diff
        _accum(pred, d)
        _accum(target, -d)

    return _record(np.asarray(np.mean(diff * diff)), (pred, target), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _record(y, (x,), bw)


def layer_norm_nolearn(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` over the last axis, population variance."""
    if eps < 0:
        raise ConfigError("eps must be nonnegative")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    if eps == 0 and np.any(denom == 0):
        raise NumericError("layer norm of a zero-variance row with eps=0")
    inv = 1.0 / np.sqrt(denom)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - y * gy))

    return _record(y, (x,), bw)


def rms_norm_lastdim(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x.data * inv

    def bw(g):
        _accum(x, inv * (g - y * (g * y).mean(axis=-1, keepdims=True)))

    return _record(y, (x,), bw)


# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape) -> None:
    """Run reverse mode over ``tape``; leaf gradients accumulate in ``.grad``."""
    if tape.consumed:
        raise UsageError("backward was already run on this tape")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        tape.consumed = True
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        node._backward(node.grad)
        # free intermediate buffers as we go
        node.grad = None if node is not loss else node.grad
        node._backward = None
        node._parents = ()
    tape.consumed = True
    tape.nodes = []
