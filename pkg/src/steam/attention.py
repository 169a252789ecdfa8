"""Multi-head scaled dot-product attention over sparse graph neighbourhoods.

Node features are low-dimensional (a single pooled scalar per node in the
default configuration). Keys and queries are affine projections of those
features to ``d = H * d_k`` dimensions; the per-head attention matrices are
averaged before being applied to the raw features, and there is no value or
output projection. Parameter count is therefore ``2 * (d_in * d + d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, EmptyNeighborhoodError, ParameterError
from .graph import EdgeDropMask, Graph
from .rng import Rng


@dataclass
class GraphAttentionParams:
    heads: int
    d_k: int
    w_k: Tensor  # (d_in, d)
    b_k: Tensor  # (d,)
    w_q: Tensor
    b_q: Tensor

    @property
    def d(self) -> int:
        return self.heads * self.d_k

    @property
    def d_in(self) -> int:
        return self.w_k.shape[0]

    def parameters(self) -> list:
        return [self.w_k, self.b_k, self.w_q, self.b_q]

    def named_parameters(self, prefix: str = "") -> list:
        return [(prefix + n, t) for n, t in zip(("w_k", "b_k", "w_q", "b_q"), self.parameters())]

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def head(self, h: int) -> tuple:
        """Key weight, key bias, query weight, query bias of head ``h`` as arrays."""
        sl = slice(h * self.d_k, (h + 1) * self.d_k)
        return (self.w_k.data[:, sl].T, self.b_k.data[sl],
                self.w_q.data[:, sl].T, self.b_q.data[sl])


def init_params(d: int, heads: int, rng: Rng, d_in: int = 1) -> GraphAttentionParams:
    """Weights ~ N(0, 1/sqrt(d_k)), biases zero."""
    if heads < 1 or d < 1 or d % heads:
        raise ParameterError(f"heads must divide d (d={d}, H={heads})")
    d_k = d // heads
    std = 1.0 / math.sqrt(d_k)
    w_k = Tensor(rng.normal((d_in, d), std=std), requires_grad=True)
    w_q = Tensor(rng.normal((d_in, d), std=std), requires_grad=True)
    return GraphAttentionParams(heads, d_k, w_k, Tensor(np.zeros(d), requires_grad=True),
                                w_q, Tensor(np.zeros(d), requires_grad=True))


@dataclass
class AttentionOutput:
    updated: Tensor  # same shape as the input features
    attn: np.ndarray  # head-averaged (N, N), or (B, N, N) for batched input


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0], 1)), True
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise DimensionError(f"attention features must be (N,), (N, d_in) or (B, N, d_in); got {x.shape}")


def logit_scale(d_k: int, sqrt_scaling: bool) -> float:
    return math.sqrt(d_k) if sqrt_scaling else float(d_k)


def graph_attention(x, g: Graph, mask: EdgeDropMask | None, p: GraphAttentionParams,
                    sqrt_scaling: bool = False) -> AttentionOutput:
    """Attend over each node's neighbours in ``g`` and aggregate the raw features."""
    x = ad.as_tensor(x)
    orig_shape = x.shape
    xb, unbatched = _as_batched(x)
    bsz, n, d_in = xb.shape
    if n != g.num_nodes:
        raise DimensionError(f"features have {n} nodes but graph has {g.num_nodes}")
    if d_in != p.d_in:
        raise DimensionError(f"features have dim {d_in}, parameters expect {p.d_in}")
    if (g.degrees == 0).any():
        raise EmptyNeighborhoodError()
    edge_mask = mask.edge_mask(g) if mask is not None else None
    src, dst, offsets = g.src, g.dst, g.offsets
    e = len(src)

    keys = ad.affine(xb, p.w_k, p.b_k)
    queries = ad.affine(xb, p.w_q, p.b_q)
    prod = ad.take(keys, src, axis=1) * ad.take(queries, dst, axis=1)
    logits = ad.reshape(prod, (bsz, e, p.heads, p.d_k)).sum(axis=-1)
    logits = logits / logit_scale(p.d_k, sqrt_scaling)
    weights = ad.segment_softmax(logits, src, offsets, edge_mask)
    avg = weights.mean(axis=-1)  # head average before aggregation
    msgs = ad.reshape(avg, (bsz, e, 1)) * ad.take(xb, dst, axis=1)
    updated = ad.segment_sum(msgs, src, offsets)

    attn = np.zeros((bsz, n, n))
    attn[:, src, dst] = avg.data
    if unbatched:
        return AttentionOutput(ad.reshape(updated, orig_shape), attn[0])
    return AttentionOutput(updated, attn)


def attention_flops(num_nodes: int, num_edges: int, d: int, heads: int, d_in: int = 1) -> int:
    """FLOPs of one unbatched :func:`graph_attention` call over ``num_edges`` directed edges."""
    d_k = d // heads
    proj = 2 * (2 * num_nodes * d_in * d)
    logits = num_edges * d + num_edges * heads * (d_k - 1) + num_edges * heads
    softmax = 5 * num_edges * heads
    head_mean = num_edges * heads
    aggregate = num_edges * d_in + (num_edges - num_nodes) * d_in
    return proj + logits + softmax + head_mean + aggregate


def dense_attention_oracle(x, g: Graph, mask: EdgeDropMask | None, p: GraphAttentionParams,
                           sqrt_scaling: bool = False) -> AttentionOutput:
    """Reference path: full N x N logits with an additive mask (numpy only, no autodiff)."""
    xs = np.asarray(getattr(x, "data", x), dtype=np.float64)
    shape = xs.shape
    if xs.ndim == 1:
        xs = xs[None, :, None]
    elif xs.ndim == 2:
        xs = xs[None]
    bsz, n, _ = xs.shape
    if n != g.num_nodes:
        raise DimensionError(f"features have {n} nodes but graph has {g.num_nodes}")

    allowed = np.zeros((n, n), dtype=bool)
    for i, nb in enumerate(g.neighbors):
        allowed[i, list(nb)] = True
    if mask is not None:
        for i, j in mask.entries().items():
            allowed[i, j] = False
    if not allowed.any(axis=1).all():
        raise EmptyNeighborhoodError()
    additive = np.where(allowed, 0.0, -1e30)
    scale = logit_scale(p.d_k, sqrt_scaling)

    updated = np.empty_like(xs)
    attn = np.empty((bsz, n, n))
    for b in range(bsz):
        acc = np.zeros((n, n))
        for h in range(p.heads):
            wk, bk, wq, bq = p.head(h)
            k = xs[b] @ wk.T + bk
            q = xs[b] @ wq.T + bq
            z = k @ q.T / scale + additive
            z = np.exp(z - z.max(axis=1, keepdims=True))
            acc += z / z.sum(axis=1, keepdims=True)
        attn[b] = acc / p.heads
        updated[b] = attn[b] @ xs[b]
    if len(shape) < 3:
        return AttentionOutput(Tensor(updated[0].reshape(shape)), attn[0])
    return AttentionOutput(Tensor(updated), attn)
