"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 or float64) and record a
backward graph as they are combined. The op set is deliberately small:
exactly the kernels a decoder language model needs, each with a
hand-written backward rule. Gradients land on leaf tensors only;
intermediate cotangents live in transient buffers during `backward`.
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

# Target value that excludes a position from loss and gradient.
IGNORE_INDEX = -100

# Additive masking constant per dtype. Used instead of true -inf so that
# f32 softmax never sees NaN from (-inf) - (-inf).
MASK_NEG = {
    np.dtype(np.float32): -1e9,
    np.dtype(np.float64): -1e300,
}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptyLossError(ValueError):
    """A loss was requested over zero scored positions."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-dimensional array with an optional gradient and backward record.

    `_pairs` holds (parent, pull) edges where `pull` maps this node's
    cotangent to the parent's contribution. Leaves (no pairs) accumulate
    into `.grad`; anything else is internal to `backward`.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._pairs: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]] = []

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other, self.dtype)))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, pairs) -> Tensor:
    """Build an op result, keeping only edges to grad-needing parents."""
    out = Tensor(data)
    if _grad_enabled:
        kept = [(p, fn) for p, fn in pairs if p.requires_grad]
        if kept:
            out._pairs = kept
            out.requires_grad = True
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float64))
    b = _coerce(b, a.dtype)
    data = a.data + b.data
    return _make(data, [
        (a, lambda g: _sum_to(g, a.shape)),
        (b, lambda g: _sum_to(g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", np.float64))
    b = _coerce(b, a.dtype)
    data = a.data * b.data
    return _make(data, [
        (a, lambda g: _sum_to(g * b.data, a.shape)),
        (b, lambda g: _sum_to(g * a.data, b.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: -g)])


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    sig = _sigmoid(x.data)
    data = x.data * sig
    return _make(data, [(x, lambda g: g * (sig * (1.0 + x.data * (1.0 - sig))))])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x))."""
    data = np.where(x.data >= 0, -np.log1p(np.exp(-np.abs(x.data))),
                    x.data - np.log1p(np.exp(-np.abs(x.data))))
    data = np.asarray(data, dtype=x.dtype)
    return _make(data, [(x, lambda g: g * _sigmoid(-x.data))])


def straight_through(x: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply `fn` to the values; pass gradients through unchanged.

    Used for quantization-aware forward passes where the true derivative
    is zero almost everywhere.
    """
    data = np.asarray(fn(x.data), dtype=x.dtype)
    if data.shape != x.shape:
        raise ShapeError(f"straight_through fn changed shape {x.shape} -> {data.shape}")
    return _make(data, [(x, lambda g: g)])


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[..., start:stop]

    def pull(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return full

    return _make(data.copy(), [(a, pull)])


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last needs matching leading shapes: {a.shape} vs {b.shape}")
    split = a.shape[-1]
    data = np.concatenate([a.data, b.data], axis=-1)
    return _make(data, [
        (a, lambda g: g[..., :split]),
        (b, lambda g: g[..., split:]),
    ])


# ---------------------------------------------------------------------------
# matmul and lookups

def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of stacked matrices.

    Both operands must have ndim >= 2; inner extents must match. Leading
    (batch) axes follow numpy matmul broadcasting; gradients are reduced
    back to each operand's shape.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch shapes incompatible: {a.shape} @ {b.shape}") from exc
    return _make(data, [
        (a, lambda g: _sum_to(g @ _swap(b.data), a.shape)),
        (b, lambda g: _sum_to(_swap(a.data) @ g, b.shape)),
    ])


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` by integer id (backward scatter-adds)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding ids must be 1-D, got shape {ids.shape}")
    n_rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise ValueError(f"token id out of range [0, {n_rows}): min={ids.min()}, max={ids.max()}")

    def pull(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return full

    return _make(table.data[ids].copy(), [(table, pull)])


# ---------------------------------------------------------------------------
# reductions and normalizations

def tsum(x: Tensor) -> Tensor:
    """Sum of all elements (scalar tensor)."""
    data = np.asarray(x.data.sum(), dtype=x.dtype)
    return _make(data, [(x, lambda g: np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))])


def tmean(x: Tensor) -> Tensor:
    """Mean of all elements (scalar tensor)."""
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.dtype)
    return _make(data, [(x, lambda g: np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True))])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along `axis` with max subtraction.

    A slice whose entries are all at or below the dtype's masking
    constant (or -inf) is treated as fully masked: its output is all
    zeros rather than NaN/uniform, and a RuntimeWarning is issued.
    """
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    masked = (m <= MASK_NEG[x.dtype]) | np.isneginf(m)
    with np.errstate(invalid="ignore"):
        e = np.exp(x.data - m)
        s = e / e.sum(axis=axis, keepdims=True)
    if masked.any():
        warnings.warn("softmax over fully masked slice; returning zeros", RuntimeWarning)
        s = np.where(masked, 0.0, s).astype(x.dtype)

    def pull(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - inner)

    return _make(s, [(x, pull)])


def rms_norm(x: Tensor, weight: Tensor, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * weight, mean over the last axis."""
    d = x.shape[-1]
    if weight.data.ndim != 1 or weight.shape[0] != d:
        raise ShapeError(f"rms_norm weight shape {weight.shape} does not match last extent {d}")
    if eps < 0:
        raise ValueError(f"rms_norm eps must be >= 0, got {eps}")
    r = np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xn = x.data / r
    data = xn * weight.data

    def pull_x(g):
        gw = g * weight.data
        inner = (gw * x.data).sum(axis=-1, keepdims=True)
        return gw / r - x.data * inner / (d * r**3)

    def pull_w(g):
        gw = g * xn
        return gw.reshape(-1, d).sum(axis=0)

    return _make(data, [(x, pull_x), (weight, pull_w)])


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax probability of `targets`.

    Positions whose target equals `ignore_index` contribute nothing to
    the value or the gradient. Raises EmptyLossError if every position
    is ignored.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [T, V] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(f"targets shape {t.shape} does not match logits rows {logits.shape[0]}")
    scored = t != ignore_index
    n = int(scored.sum())
    if n == 0:
        raise EmptyLossError("cross_entropy: every position is ignored")
    vocab = logits.shape[1]
    tv = t[scored]
    if tv.min() < 0 or tv.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab}): min={tv.min()}, max={tv.max()}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    rows = np.nonzero(scored)[0]
    nll = lse[rows] - z[rows, tv]
    data = np.asarray(nll.mean(), dtype=logits.dtype)

    def pull(g):
        full = np.zeros_like(z)
        zs = z[rows]
        probs = np.exp(zs - zs.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), tv] -= 1.0
        full[rows] = probs * (g / n)
        return full

    return _make(data, [(logits, pull)])


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> None:
    """Populate `.grad` on every reachable leaf with d(loss)/d(leaf).

    Repeated calls accumulate into existing gradients. `loss` must be a
    scalar (one element).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._pairs:
            stack.append((parent, False))

    cotangent: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = cotangent.pop(id(node), None)
        if g is None:
            continue
        if not node._pairs:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pull in node._pairs:
            contrib = pull(g)
            key = id(parent)
            if key in cotangent:
                cotangent[key] = cotangent[key] + contrib
            else:
                cotangent[key] = contrib
