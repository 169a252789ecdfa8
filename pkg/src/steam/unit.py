"""The STEAM unit: channel and spatial interaction attention with output-guided pooling.

Shapes: feature maps are ``(C, H, W)`` or batched ``(B, C, H, W)``; outputs
keep the rank of the input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .attention import GraphAttentionParams, attention_flops, graph_attention, init_params
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, ParameterError
from .graph import (EdgeDropMask, Graph, build_cyclic_channel_graph, build_grid_spatial_graph,
                    build_knn_correlation_graph, sample_edge_drop)
from .rng import Rng

ARRANGEMENTS = ("ca-sa", "sa-ca", "ca+sa")
ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid, "none": ad.identity}
POOLS = ("avg", "max", "avg+max")
# FLOPs per entry of each inter-module activation (see autodiff.FLOP_CONVENTIONS)
ACTIVATION_FLOPS = {"tanh": 4, "relu": 1, "sigmoid": 4, "none": 0}


@dataclass(frozen=True)
class SteamConfig:
    d: int = 8
    heads: int = 4
    arrangement: str = "ca-sa"
    m: int = 7
    channel_hops: int = 1
    edge_drop: bool = True
    inter_activation: str = "tanh"
    channel_pool: str = "avg"
    spatial_pool: str = "avg"
    sqrt_scaling: bool = False
    include_self_loops: bool = False

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"heads must divide d (d={self.d}, heads={self.heads})")
        if self.m < 2:
            raise ConfigError(f"m must be >= 2, got {self.m}")
        if self.arrangement not in ARRANGEMENTS:
            raise ConfigError(f"arrangement must be one of {ARRANGEMENTS}, got {self.arrangement!r}")
        if self.channel_hops not in (1, 2):
            raise ConfigError(f"channel_hops must be 1 or 2, got {self.channel_hops}")
        if self.inter_activation not in ACTIVATIONS:
            raise ConfigError(f"inter_activation must be one of {tuple(ACTIVATIONS)}")
        for name in ("channel_pool", "spatial_pool"):
            if getattr(self, name) not in POOLS:
                raise ConfigError(f"{name} must be one of {POOLS}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def d_k(self) -> int:
        return self.d // self.heads


def _pool_dim(how: str) -> int:
    return 2 if how == "avg+max" else 1


class SteamUnit:
    """One STEAM unit: ``4d`` CIA parameters plus ``4d`` SIA parameters."""

    def __init__(self, cfg: SteamConfig | None = None, rng: Rng | None = None):
        self.cfg = cfg or SteamConfig()
        rng = rng or Rng(0)
        self.cia_params = init_params(self.cfg.d, self.cfg.heads, rng, _pool_dim(self.cfg.channel_pool))
        self.sia_params = init_params(self.cfg.d, self.cfg.heads, rng, _pool_dim(self.cfg.spatial_pool))
        self.spatial_graph = build_grid_spatial_graph(self.cfg.m, self.cfg.include_self_loops)
        self._channel_graphs: dict[int, Graph] = {}
        self.last_mask: EdgeDropMask | None = None

    def channel_graph(self, num_channels: int) -> Graph:
        g = self._channel_graphs.get(num_channels)
        if g is None:
            g = build_cyclic_channel_graph(num_channels, self.cfg.channel_hops, self.cfg.include_self_loops)
            self._channel_graphs[num_channels] = g
        return g

    def parameters(self) -> list:
        return self.cia_params.parameters() + self.sia_params.parameters()

    def named_parameters(self, prefix: str = "") -> list:
        return (self.cia_params.named_parameters(prefix + "cia.")
                + self.sia_params.named_parameters(prefix + "sia."))

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def __call__(self, x, training: bool = False, rng: Rng | None = None) -> Tensor:
        return steam_forward(x, self, training, rng)


# -- pooling and resampling -----------------------------------------------------------


def _batched(x) -> tuple[Tensor, bool]:
    x = ad.as_tensor(x)
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C, H, W) or (B, C, H, W) feature map, got {x.shape}")


def _check_divisible(h: int, w: int, m: int) -> None:
    if h % m or w % m:
        raise DimensionError(f"spatial size H={h}, W={w} is not divisible by m={m}")


def _reduce(x: Tensor, axis, how: str) -> Tensor:
    return x.mean(axis=axis) if how == "avg" else ad.max_(x, axis=axis)


def channel_pool(x: Tensor, how: str = "avg") -> Tensor:
    """(B, C, H, W) -> (B, C, d_in) node features for the channel graph."""
    if how == "avg+max":
        return ad.concat([ad.reshape(_reduce(x, (2, 3), p), x.shape[:2] + (1,)) for p in ("avg", "max")], axis=2)
    return ad.reshape(_reduce(x, (2, 3), how), x.shape[:2] + (1,))


def _ogp_batched(x: Tensor, m: int, how: str = "avg") -> Tensor:
    bsz, _, h, w = x.shape
    _check_divisible(h, w, m)
    plane = _reduce(x, 1, how)
    if how == "avg":
        return ad.block_mean(plane, h // m, w // m)
    blocks = ad.reshape(plane, (bsz, m, h // m, m, w // m))
    return _reduce(blocks, (2, 4), how)


def ogp(x, m: int) -> Tensor:
    """Output-guided pooling: channel mean, then non-overlapping block mean down to ``m x m``."""
    xb, unbatched = _batched(x)
    out = _ogp_batched(xb, m)
    return ad.reshape(out, (m, m)) if unbatched else out


def spatial_pool(x: Tensor, m: int, how: str = "avg") -> Tensor:
    """(B, C, H, W) -> (B, m*m, d_in) node features for the spatial graph."""
    bsz = x.shape[0]
    if how == "avg+max":
        cols = [ad.reshape(_ogp_batched(x, m, p), (bsz, m * m, 1)) for p in ("avg", "max")]
        return ad.concat(cols, axis=2)
    return ad.reshape(_ogp_batched(x, m, how), (bsz, m * m, 1))


def upsample_repeat(s, h: int, w: int) -> Tensor:
    """Nearest-neighbour block replication of an ``m x m`` map (last two axes) to ``h x w``."""
    s = ad.as_tensor(s)
    m_h, m_w = s.shape[-2:]
    if h % m_h or w % m_w:
        raise DimensionError(f"target H={h}, W={w} is not divisible by map size {m_h}x{m_w}")
    return ad.repeat_blocks(s, h // m_h, w // m_w)


# -- attention branches ------------------------------------------------------------------


def _scores(feats: Tensor, g: Graph, mask, p: GraphAttentionParams, cfg: SteamConfig) -> Tensor:
    """Sigmoid of the attended node features, (B, N, d_in) -> (B, N)."""
    out = graph_attention(feats, g, mask, p, cfg.sqrt_scaling).updated
    bsz, n, d_in = out.shape
    out = ad.reshape(out, (bsz, n)) if d_in == 1 else out.mean(axis=2)
    return ad.sigmoid(out)


def channel_scores(x: Tensor, unit: SteamUnit) -> Tensor:
    """alpha_c, shape (B, C), from a batched feature map."""
    c = x.shape[1]
    if c < 3:
        raise ParameterError(f"channel attention needs C >= 3, got C={c}")
    feats = channel_pool(x, unit.cfg.channel_pool)
    return _scores(feats, unit.channel_graph(c), None, unit.cia_params, unit.cfg)


def _sample_mask(unit: SteamUnit, training: bool, rng: Rng | None) -> EdgeDropMask | None:
    cfg = unit.cfg
    if not (training and cfg.edge_drop):
        unit.last_mask = None
        return None
    if rng is None:
        raise ParameterError("training-mode edge drop needs an rng")
    mask = sample_edge_drop(unit.spatial_graph, cfg.m, rng)
    unit.last_mask = mask
    return mask


def spatial_scores(s_in: Tensor, unit: SteamUnit, training: bool, rng: Rng | None) -> Tensor:
    """alpha_s, shape (B, 1, H, W): OGP -> grid attention -> sigmoid -> block upsample."""
    bsz, _, h, w = s_in.shape
    m = unit.cfg.m
    _check_divisible(h, w, m)
    feats = spatial_pool(s_in, m, unit.cfg.spatial_pool)
    mask = _sample_mask(unit, training, rng)
    alpha_init = ad.reshape(_scores(feats, unit.spatial_graph, mask, unit.sia_params, unit.cfg), (bsz, m, m))
    return ad.reshape(upsample_repeat(alpha_init, h, w), (bsz, 1, h, w))


def cia(x, unit: SteamUnit) -> tuple[Tensor, Tensor]:
    """Channel interaction attention; returns ``(x_ref, alpha_c)``."""
    xb, unbatched = _batched(x)
    alpha_c = channel_scores(xb, unit)
    x_ref = xb * ad.reshape(alpha_c, alpha_c.shape + (1, 1))
    if unbatched:
        return ad.reshape(x_ref, x_ref.shape[1:]), ad.reshape(alpha_c, alpha_c.shape[1:])
    return x_ref, alpha_c


def sia(x_ref, x_orig, unit: SteamUnit, training: bool = False, rng: Rng | None = None) -> Tensor:
    """Spatial interaction attention with the residual: ``x_orig + alpha_s * x_ref``."""
    rb, unbatched = _batched(x_ref)
    xb, _ = _batched(x_orig)
    if rb.shape != xb.shape:
        raise DimensionError(f"x_ref {rb.shape} and x_orig {xb.shape} differ")
    s_in = ACTIVATIONS[unit.cfg.inter_activation](rb)
    out = xb + spatial_scores(s_in, unit, training, rng) * rb
    return ad.reshape(out, out.shape[1:]) if unbatched else out


def steam_forward(x, unit: SteamUnit, training: bool = False, rng: Rng | None = None) -> Tensor:
    xb, unbatched = _batched(x)
    act = ACTIVATIONS[unit.cfg.inter_activation]
    arrangement = unit.cfg.arrangement
    if arrangement == "ca-sa":
        x_ref, _ = cia(xb, unit)
        out = sia(x_ref, xb, unit, training, rng)
    elif arrangement == "sa-ca":
        x_ref_s = spatial_scores(act(xb), unit, training, rng) * xb
        alpha_c = channel_scores(x_ref_s, unit)
        out = xb + ad.reshape(alpha_c, alpha_c.shape + (1, 1)) * x_ref_s
    else:  # ca+sa: both score sets from the original input
        alpha_c = channel_scores(xb, unit)
        alpha_s = spatial_scores(act(xb), unit, training, rng)
        out = xb + alpha_s * (ad.reshape(alpha_c, alpha_c.shape + (1, 1)) * xb)
    return ad.reshape(out, out.shape[1:]) if unbatched else out


def unit_flops(c: int, h: int, w: int, cfg: SteamConfig) -> int:
    """Analytic FLOPs of one unbatched eval-mode STEAM forward on a (c, h, w) map.

    Identical for all three arrangements: each performs one channel pooling,
    one activation, one OGP, two broadcast multiplies and one residual add
    over the full map, plus one attention pass per graph.
    """
    chw, hw, m = c * h * w, h * w, cfg.m
    c_din, s_din = _pool_dim(cfg.channel_pool), _pool_dim(cfg.spatial_pool)
    ch_graph = build_cyclic_channel_graph(c, cfg.channel_hops, cfg.include_self_loops)
    sp_graph = build_grid_spatial_graph(m, cfg.include_self_loops)

    def pool(n_in, n_out, how):
        # avg: mean costs 1/input; max: (inputs - outputs) comparisons
        cost = {"avg": n_in, "max": n_in - n_out}
        return cost["avg"] + cost["max"] if how == "avg+max" else cost[how]

    def score_reduce(n, d_in):
        return 0 if d_in == 1 else n * d_in

    channel = (pool(chw, c, cfg.channel_pool)
               + attention_flops(c, ch_graph.num_directed_edges, cfg.d, cfg.heads, c_din)
               + score_reduce(c, c_din) + 4 * c)
    spatial = (ACTIVATION_FLOPS[cfg.inter_activation] * chw
               + pool(chw, hw, cfg.spatial_pool) + pool(hw, m * m, cfg.spatial_pool)
               + attention_flops(m * m, sp_graph.num_directed_edges, cfg.d, cfg.heads, s_din)
               + score_reduce(m * m, s_din) + 4 * m * m)
    recalibrate = 3 * chw  # two broadcast multiplies and the residual add
    return channel + spatial + recalibrate


# -- naive baseline -----------------------------------------------------------------------


def kcam(x, params: GraphAttentionParams, k: int, sqrt_scaling: bool = False) -> tuple[Tensor, Tensor]:
    """Channel attention over a per-sample k-NN correlation graph.

    Returns ``(x * alpha, alpha)`` with ``alpha`` of shape (B, C) (or (C,)).
    """
    xb, unbatched = _batched(x)
    bsz, c, h, w = xb.shape
    feats = channel_pool(xb, "avg")
    scores = []
    for b in range(bsz):
        g = build_knn_correlation_graph(xb.data[b].reshape(c, h * w), k)
        upd = graph_attention(feats[b], g, None, params, sqrt_scaling).updated
        scores.append(ad.reshape(upd, (1, c)))
    alpha = ad.sigmoid(ad.concat(scores, axis=0))
    out = xb * ad.reshape(alpha, (bsz, c, 1, 1))
    if unbatched:
        return ad.reshape(out, out.shape[1:]), ad.reshape(alpha, (c,))
    return out, alpha
