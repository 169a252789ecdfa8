"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient (and recording is enabled), the output keeps references to its
parents together with a closure mapping the output gradient to one gradient
per parent. :func:`build_tape` linearises that graph into a topologically
ordered :class:`Tape`; ``loss.backward()`` replays it in reverse.

Operations also report their floating-point cost to an active
:class:`FlopCounter`, using the conventions listed in :data:`FLOP_CONVENTIONS`.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, EmptyNeighborhoodError

MASK_SENTINEL = -1e30

FLOP_CONVENTIONS = (
    "1 multiply-accumulate = 2 FLOPs (matmul, affine projection, convolution)",
    "elementwise add/sub/mul/div = 1 FLOP per output entry; relu = 1",
    "sum = (inputs - outputs) adds; mean = 1 FLOP per input entry",
    "exp/log/sigmoid/tanh = 4 FLOPs per entry",
    "softmax = 5 FLOPs per entry (masked entries included)",
    "gather, reshape, transpose, broadcast and block repetition are free",
)

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_flop_counter = contextvars.ContextVar("flop_counter", default=None)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@dataclass
class FlopCounter:
    """Accumulates FLOPs reported by executed operations, keyed by op name."""

    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n) -> None:
        n = int(n)
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n

    @contextlib.contextmanager
    def active(self):
        token = _flop_counter.set(self)
        try:
            yield self
        finally:
            _flop_counter.reset(token)


def _count(op: str, n) -> None:
    counter = _flop_counter.get()
    if counter is not None:
        counter.add(op, n)


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = ""

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar -------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- tape -------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded operations in topological order (inputs precede outputs)."""

    nodes: list

    def __len__(self) -> int:
        return len(self.nodes)


def build_tape(root: Tensor) -> Tape:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data + b.data
    _count("add", out.size)
    return _make(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data - b.data
    _count("add", out.size)
    return _make(out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data * b.data
    _count("mul", out.size)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data)
    out = a.data / b.data
    _count("div", out.size)

    def bw(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), bw, "div")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    _count("matmul", 2 * out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with the bias as the accumulator seed (one MAC per weight use)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    out = np.matmul(x.data, w.data) + b.data
    _count("affine", 2 * out.size * w.shape[0])

    def bw(g):
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(x.data.reshape(-1, w.shape[0]).T, g.reshape(-1, w.shape[1]))
        gb = g.reshape(-1, w.shape[1]).sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, w, b), bw, "affine")


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return g


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))
    _count("sum", x.size - out.size)
    return _make(out, (x,), lambda g: (np.broadcast_to(_expand_reduced(g, axes, keepdims), x.shape).copy(),), "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims))
    _count("mean", x.size)
    return _make(out, (x,), lambda g: (np.broadcast_to(_expand_reduced(g, axes, keepdims) / n, x.shape).copy(),), "mean")


def max_(x, axis=None, keepdims=False) -> Tensor:
    """Maximum over ``axis``; ties route the gradient to the first maximiser."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    _count("max", x.size - out.size)
    if keepdims:
        out = _expand_reduced(out, axes, False)

    def bw(g):
        g = g.reshape(arg.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return _make(np.asarray(out), (x,), bw, "max")


# -- shape manipulation ---------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes) if axes is not None else None
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data[idx])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), bw, "index")


def take(x, indices, axis: int) -> Tensor:
    """Gather slices along ``axis`` (indices may repeat)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        sel = (slice(None),) * axis + (indices,)
        np.add.at(gx, sel, g)
        return (gx,)

    return _make(out, (x,), bw, "take")


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def repeat_blocks(x, rh: int, rw: int) -> Tensor:
    """Replicate every entry of the last two axes into an ``rh x rw`` block."""
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, rh, axis=-2), rw, axis=-1)

    def bw(g):
        lead = g.shape[:-2]
        h, w = x.shape[-2:]
        return (g.reshape(lead + (h, rh, w, rw)).sum(axis=(-3, -1)),)

    return _make(out, (x,), bw, "repeat")


def block_mean(x, rh: int, rw: int) -> Tensor:
    """Average non-overlapping ``rh x rw`` blocks of the last two axes.

    Deviations from each block's first entry are averaged and added back, so
    a block of identical values returns that value bit-exactly and
    ``block_mean(repeat_blocks(s))`` recovers ``s``.
    """
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % rh or w % rw:
        raise DimensionError(f"H={h}, W={w} not divisible into {rh}x{rw} blocks")
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (h // rh, rh, w // rw, rw))
    anchor = blocks[..., :, :1, :, :1]
    out = anchor[..., :, 0, :, 0] + (blocks - anchor).mean(axis=(-3, -1))
    _count("mean", x.size)

    def bw(g):
        return (np.repeat(np.repeat(g, rh, axis=-2), rw, axis=-1) / (rh * rw),)

    return _make(out, (x,), bw, "block_mean")


# -- nonlinearities ---------------------------------------------------------------


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    _count("exp", 4 * out.size)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)
    _count("log", 4 * out.size)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # keep the open interval (0, 1) where float64 would round to an endpoint
    out = np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    _count("sigmoid", 4 * out.size)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    _count("tanh", 4 * out.size)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)
    _count("relu", out.size)
    return _make(out, (x,), lambda g: (g * pos,), "relu")


def identity(x) -> Tensor:
    return as_tensor(x)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0.

    Masked logits are shifted by a large negative sentinel before the usual
    max-subtraction, so dense and masked inputs share one code path.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise EmptyNeighborhoodError()
        z = z + np.where(mask, 0.0, MASK_SENTINEL)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    _count("softmax", 5 * out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


# -- segment (sparse neighbourhood) ops -----------------------------------------------
# Edges are sorted by source node; ``offsets[i]`` is the first edge of node i
# and ``seg[e]`` the source node of edge e. Segments run along axis 1.


def segment_softmax(x, seg: np.ndarray, offsets: np.ndarray, mask=None) -> Tensor:
    """Softmax over each node's outgoing edges, for ``x`` shaped (B, E, ...)."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if (np.add.reduceat(mask.astype(np.int64), offsets) == 0).any():
            raise EmptyNeighborhoodError()
        bias = np.where(mask, 0.0, MASK_SENTINEL).reshape((1, -1) + (1,) * (x.ndim - 2))
        z = z + bias
    seg_max = np.maximum.reduceat(z, offsets, axis=1)
    e = np.exp(z - np.take(seg_max, seg, axis=1))
    out = e / np.take(np.add.reduceat(e, offsets, axis=1), seg, axis=1)
    _count("softmax", 5 * out.size)

    def bw(g):
        s = np.add.reduceat(g * out, offsets, axis=1)
        return (out * (g - np.take(s, seg, axis=1)),)

    return _make(out, (x,), bw, "segment_softmax")


def segment_sum(x, seg: np.ndarray, offsets: np.ndarray) -> Tensor:
    """Sum each node's edge entries along axis 1: (B, E, ...) -> (B, N, ...)."""
    x = as_tensor(x)
    out = np.add.reduceat(x.data, offsets, axis=1)
    _count("sum", x.size - out.size)
    return _make(out, (x,), lambda g: (np.take(g, seg, axis=1),), "segment_sum")


# -- convolution ------------------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (B, C_in, H, W) or (C_in, H, W); ``w``: (C_out, C_in, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    num_h, num_w = h + 2 * pad - kh, wd + 2 * pad - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise DimensionError(
            f"conv2d output size not integral: H={h}, W={wd}, k={kh}, stride={stride}, pad={pad}")
    ho, wo = num_h // stride + 1, num_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    _count("conv2d", 2 * out.size * cin * kh * kw)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1)
        _count("add", out.size)
        parents = (x, w, b)
    out = np.ascontiguousarray(out)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.tensordot(
                    g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    res = _make(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if unbatched else res


# -- losses -------------------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, K) logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    out = np.asarray(-logp[np.arange(n), labels].mean())

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(out, (logits,), bw, "cross_entropy")
