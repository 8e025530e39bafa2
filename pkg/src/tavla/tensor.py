"""Reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ndarray; a :class:`Graph` is an explicit tape that
records every op executed while it is active. ``backward(loss)`` walks the
tape in reverse insertion order and accumulates gradients into the ``.grad``
of every leaf tensor with ``requires_grad=True``. Gradients add across
backward passes; callers zero them explicitly.

Ops run in a pure-numpy fast path when no graph is active (or when no operand
requires grad), so frozen components pay no tape overhead.

Conventions:
  * float32 by default, float64 supported end to end (gradient checks run in
    float64).
  * matmul operands need at least 2 dims; leading dims broadcast, and
    gradients for broadcast operands are sum-reduced back to their shape.
  * ``layer_norm`` normalizes the last axis (eps 1e-5 by default);
    ``l2_normalize`` divides by ``max(||x||, eps)`` with eps 1e-12.
  * ``softmax`` rejects NaN/+inf inputs and NaN outputs (a fully masked row)
    with :class:`NumericError`; -inf is allowed as an additive mask value.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, NumericError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An ndarray plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Operator sugar. Reverse forms wrap the constant operand.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, like=self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ndarrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, dtype=dtype)


class _Node:
    __slots__ = ("out", "parents", "bwd")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], bwd: Callable):
        self.out = out
        self.parents = parents
        self.bwd = bwd


_active = threading.local()


def _graph_stack() -> list:
    stack = getattr(_active, "stack", None)
    if stack is None:
        stack = []
        _active.stack = stack
    return stack


class Graph:
    """Tape of executed ops. Use as a context manager around forward code."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _graph_stack().pop()
        if top is not self:
            raise UsageError("graph context exited out of order")

    @staticmethod
    def active() -> "Graph | None":
        stack = _graph_stack()
        return stack[-1] if stack else None

    def clear(self) -> None:
        self.nodes.clear()


def _record(out: Tensor, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    graph = Graph.active()
    if graph is not None and out.requires_grad:
        graph.nodes.append(_Node(out, parents, bwd))
        out._graph = graph
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar recorded on some graph. Running backward twice
    over the same graph adds the gradients again.
    """
    graph = loss._graph
    if graph is None:
        if loss.requires_grad and loss.grad is None:
            # A bare leaf: gradient of itself is 1.
            loss.grad = np.ones_like(loss.data)
            return
        raise UsageError("backward() called on a tensor with no recorded graph")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss; got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.bwd(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
                holders[pid] = parent
    for tid, g in grads.items():
        leaf = holders[tid]
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    return _record(out, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y, requires_grad=a.requires_grad)
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad)
    return _record(out, (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    # Stable piecewise form; grad is s*(1-s).
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, requires_grad=a.requires_grad)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a: Tensor) -> Tensor:
    """Exact gaussian-error-linear unit, x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = Tensor(x * phi, requires_grad=a.requires_grad)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record(out, (a,), bwd)


def quick_gelu(a: Tensor) -> Tensor:
    """x * sigmoid(1.702 x), the approximation used by CLIP-style towers."""
    x = a.data
    s = 1.0 / (1.0 + np.exp(-1.702 * x))
    out = Tensor(x * s, requires_grad=a.requires_grad)

    def bwd(g):
        return (g * (s + 1.702 * x * s * (1.0 - s)),)

    return _record(out, (a,), bwd)


def abs_(a: Tensor) -> Tensor:
    """|x| with subgradient sign(x) (0 at 0)."""
    out = Tensor(np.abs(a.data), requires_grad=a.requires_grad)
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, requires_grad=a.requires_grad)
    return _record(out, (a,), lambda g: (2.0 * g * a.data,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), requires_grad=a.requires_grad)
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the trailing two axes, keeping leading batch axes."""
    if a.ndim < 2:
        raise ShapeError(f"swap_last needs ndim >= 2; got shape {a.shape}")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of shape {a.shape}"
        )
    idx = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim)
    )
    out = Tensor(a.data[idx], requires_grad=a.requires_grad)
    src_shape = a.shape

    def bwd(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=a.requires_grad)
    src_shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, src_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, src_shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands; got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        # Reduce broadcast batch dims back onto each operand.
        if ga.shape != a.shape:
            ga = _unbroadcast(ga, a.shape)
        if gb.shape != b.shape:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array ``ids``."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers; got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids], requires_grad=table.requires_grad)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# normalization and attention


def _check_softmax_input(x: np.ndarray) -> None:
    # -inf is a legal mask value; NaN and +inf are not.
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError("softmax input contains NaN or +inf")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_softmax_input(a.data)
    with np.errstate(invalid="ignore"):  # fully masked rows are caught below
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)
    if np.isnan(y).any():
        raise NumericError("softmax produced NaN (fully masked row)")
    out = Tensor(y, requires_grad=a.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_softmax_input(a.data)
    with np.errstate(invalid="ignore"):  # fully masked rows are caught below
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        y = shifted - logsum
    if np.isnan(y).any():
        raise NumericError("log_softmax produced NaN (fully masked row)")
    out = Tensor(y, requires_grad=a.requires_grad)
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    gain = as_tensor(gain, like=a)
    bias = as_tensor(bias, like=a)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim ({d},)"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(
        xhat * gain.data + bias.data,
        requires_grad=a.requires_grad or gain.requires_grad or bias.requires_grad,
    )

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        g_bias = g.sum(axis=lead) if bias.requires_grad else None
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            g_a = (gx - m1 - xhat * m2) * inv
        else:
            g_a = None
        return g_a, g_gain, g_bias

    return _record(out, (a, gain, bias), bwd)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = L2_NORM_EPS) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom
    out = Tensor(y, requires_grad=a.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / denom,)

    return _record(out, (a,), bwd)


def causal_mask(n: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """(n, n) additive mask: 0 on/below the diagonal, -inf above."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over pre-projected q/k/v.

    Shapes: q (..., S, D), k/v (..., Sk, D) with matching leading dims.
    ``mask`` is an additive array broadcastable to (..., S, Sk); use -inf to
    forbid a position. Returns (output (..., S, D), weights (..., H, S, Sk)).
    """
    d = q.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"model dim {d} is not divisible by {n_heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"q/k/v feature dims disagree: {q.shape}, {k.shape}, {v.shape}")
    dh = d // n_heads

    def split_heads(t: Tensor) -> Tensor:
        s = t.shape[-2]
        t = reshape(t, t.shape[:-1] + (n_heads, dh))
        nd = t.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return transpose(t, perm)  # (..., H, S, dh)

    qh = split_heads(q)
    kh = split_heads(k)
    vh = split_heads(v)
    scores = mul(matmul(qh, swap_last(kh)), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = add(scores, np.asarray(mask, dtype=scores.dtype))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)  # (..., H, S, dh)
    nd = ctx.ndim
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    ctx = transpose(ctx, perm)  # (..., S, H, dh)
    out = reshape(ctx, ctx.shape[:-2] + (d,))
    return out, weights
