"""Independent oracles: finite-difference gradient checks, a brute-force channel
attention, and the invariant suite behind ``steam verify``.

Nothing here reuses the sparse attention path; the brute-force oracle reads
raw parameter arrays and neighbour lists with plain Python loops.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import dense_attention_oracle, graph_attention, init_params
from .autodiff import Tensor, no_grad
from .errors import ContractError
from .graph import (EdgeDropMask, build_cyclic_channel_graph, build_grid_spatial_graph, interior_nodes,
                    sample_edge_drop)
from .rng import Rng
from .unit import SteamConfig, SteamUnit, cia, ogp, steam_forward, upsample_repeat


@dataclass(frozen=True)
class GradcheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    analytic: float
    numeric: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        return (f"max rel err {self.max_rel_error:.3e} at input {self.worst_input} index {self.worst_index} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, tol {self.tol:g})")


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(fn, inputs, step: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``fn(*tensors)`` with central differences."""
    arrays = [np.array(getattr(x, "data", x), dtype=np.float64) for x in inputs]
    if not all(np.isfinite(a).all() for a in arrays):
        raise ContractError("gradcheck inputs must be finite")
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if out.size != 1:
        raise ContractError(f"gradcheck needs a scalar output, got shape {out.shape}")
    out.backward()

    worst = (-1.0, -1, (), 0.0, 0.0)
    for i, base in enumerate(arrays):
        grad = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[i][idx] += sign * step
                with no_grad():
                    vals.append(fn(*[Tensor(p) for p in probe]).item())
            numeric = (vals[0] - vals[1]) / (2 * step)
            err = rel_error(float(grad[idx]), numeric)
            if err > worst[0]:
                worst = (err, i, idx, float(grad[idx]), numeric)
    return GradcheckReport(max(worst[0], 0.0), worst[1], tuple(int(k) for k in worst[2]),
                           worst[3], worst[4], tol)


def brute_force_cia(x, graph, params) -> np.ndarray:
    """alpha_c for one (C, H, W) map, recomputed with nested loops.

    ``graph`` may be a :class:`Graph` or a plain list of neighbour lists.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    c, h, w = x.shape
    neigh = getattr(graph, "neighbors", graph)
    wk, bk = params.w_k.data[0], params.b_k.data
    wq, bq = params.w_q.data[0], params.b_q.data
    heads, dk = params.heads, params.d_k

    feat = []
    for ch in range(c):
        total = 0.0
        for r in range(h):
            for col in range(w):
                total += x[ch, r, col]
        feat.append(total / (h * w))

    alpha = np.empty(c)
    for i in range(c):
        weights = {j: 0.0 for j in neigh[i]}
        for hd in range(heads):
            logits = {}
            for j in neigh[i]:
                dot = 0.0
                for t in range(hd * dk, (hd + 1) * dk):
                    dot += (wk[t] * feat[i] + bk[t]) * (wq[t] * feat[j] + bq[t])
                logits[j] = dot / dk
            top = max(logits.values())
            z = sum(math.exp(v - top) for v in logits.values())
            for j in neigh[i]:
                weights[j] += math.exp(logits[j] - top) / z / heads
        agg = sum(weights[j] * feat[j] for j in neigh[i])
        alpha[i] = 1.0 / (1.0 + math.exp(-agg))
    return alpha


# -- primitive gradient cases ---------------------------------------------------------------

_SEG = np.array([0, 0, 1, 1, 1, 2])
_OFF = np.array([0, 2, 5])  # segment starts
_MASK = np.array([[True, False, True, True], [True, True, True, False]])


def _tree(fn):
    def scalar(*t):
        out = fn(*t)
        return ad.sum_(out * Tensor(_weights(out.shape)))
    return scalar


def _weights(shape) -> np.ndarray:
    # fixed non-uniform weights so gradients of sum-preserving ops are informative
    n = int(np.prod(shape))
    return (np.arange(n).reshape(shape) % 7 + 1) / 7.0


def primitive_cases(rng: np.random.Generator | None = None) -> dict:
    """name -> (scalar function, input arrays). Inputs avoid kinks of relu/max."""
    r = rng or np.random.default_rng(7)

    def u(*shape, lo=-1.0, hi=1.0):
        return r.uniform(lo, hi, shape)

    def away(*shape):
        return r.choice([-1, 1], shape) * r.uniform(0.2, 1.0, shape)

    return {
        "add": (_tree(lambda a, b: a + b), [u(2, 3), u(3)]),
        "sub": (_tree(lambda a, b: a - b), [u(2, 3), u(2, 1)]),
        "mul": (_tree(lambda a, b: a * b), [u(2, 3), u(1, 3)]),
        "div": (_tree(lambda a, b: a / b), [u(2, 3), u(2, 3, lo=0.5, hi=1.5)]),
        "matmul": (_tree(ad.matmul), [u(2, 3, 4), u(4, 2)]),
        "affine": (_tree(ad.affine), [u(2, 5, 3), u(3, 4), u(4)]),
        "sum": (_tree(lambda a: ad.sum_(a, axis=1)), [u(2, 3, 2)]),
        "mean": (_tree(lambda a: ad.mean(a, axis=(0, 2))), [u(2, 3, 2)]),
        "max": (_tree(lambda a: ad.max_(a, axis=1)), [np.array([[0.1, 0.9, -0.3], [0.5, -0.2, 0.7]])]),
        "reshape": (_tree(lambda a: ad.reshape(a, (3, 2))), [u(2, 3)]),
        "transpose": (_tree(lambda a: ad.transpose(a, (1, 0, 2))), [u(2, 3, 2)]),
        "index": (_tree(lambda a: ad.index(a, (slice(None), [0, 2, 2]))), [u(2, 3)]),
        "take": (_tree(lambda a: ad.take(a, np.array([2, 0, 2, 1]), axis=1)), [u(2, 3, 2)]),
        "concat": (_tree(lambda a, b: ad.concat([a, b], axis=1)), [u(2, 1), u(2, 2)]),
        "repeat_blocks": (_tree(lambda a: ad.repeat_blocks(a, 2, 3)), [u(2, 2, 2)]),
        "block_mean": (_tree(lambda a: ad.block_mean(a, 2, 3)), [u(2, 4, 6)]),
        "exp": (_tree(ad.exp), [u(2, 3)]),
        "log": (_tree(ad.log), [u(2, 3, lo=0.5, hi=2.0)]),
        "sigmoid": (_tree(ad.sigmoid), [u(2, 3, lo=-3, hi=3)]),
        "tanh": (_tree(ad.tanh), [u(2, 3, lo=-2, hi=2)]),
        "relu": (_tree(ad.relu), [away(2, 3)]),
        "softmax": (_tree(lambda a: ad.softmax(a, axis=1)), [u(2, 4)]),
        "softmax_masked": (_tree(lambda a: ad.softmax(a, axis=1, mask=_MASK)), [u(2, 4)]),
        "segment_softmax": (_tree(lambda a: ad.segment_softmax(a, _SEG, _OFF)), [u(2, 6, 2)]),
        "segment_sum": (_tree(lambda a: ad.segment_sum(a, _SEG, _OFF)), [u(2, 6, 2)]),
        "conv2d": (_tree(lambda x, w, b: ad.conv2d(x, w, b, stride=1, pad=1)), [u(1, 2, 4, 4), u(3, 2, 3, 3), u(3)]),
        "conv2d_stride2": (_tree(lambda x, w: ad.conv2d(x, w, None, stride=2, pad=1)), [u(2, 1, 4, 4), u(2, 1, 4, 4)]),
        "cross_entropy": (lambda z: ad.cross_entropy(z, np.array([1, 0, 3])), [u(3, 4, lo=-2, hi=2)]),
        "graph_attention": (_attention_case(), [u(5, 1)]),
    }


def _attention_case():
    g = build_cyclic_channel_graph(5)
    p = init_params(8, 4, Rng(3))
    return _tree(lambda x: graph_attention(x, g, None, p).updated)


def steam_gradcheck(arrangement: str, seed: int = 0, tol: float = 1e-4, step: float = 1e-3) -> GradcheckReport:
    """Gradient of a weighted sum of an eval-mode STEAM forward w.r.t. input and all parameters.

    Some coordinates (query biases, which shift a softmax row uniformly) have an
    exactly zero gradient, so the comparison sits on the 1e-8 denominator floor.
    The default step of 1e-3 keeps central-difference roundoff well below it;
    truncation error stays near 1e-6 relative.
    """
    cfg = SteamConfig(arrangement=arrangement, m=2)
    unit = SteamUnit(cfg, Rng(seed))
    r = np.random.default_rng(seed)
    x0 = r.normal(size=(1, 4, 4, 4))
    params = unit.parameters()
    for p in params:  # a generic point: zero biases leave some gradients near roundoff level
        p.data = r.normal(size=p.shape)
    weights = 0.01 * r.normal(size=(1, 4, 4, 4))  # small |f| shrinks difference roundoff

    def fn(x, *ps):
        _swap(unit, ps)  # route gradients to the probe tensors
        try:
            return ad.sum_(steam_forward(x, unit, training=False) * Tensor(weights))
        finally:
            _swap(unit, params)

    return gradcheck(fn, [x0] + [p.data for p in params], step=step, tol=tol)


def _swap(unit: SteamUnit, tensors) -> None:
    cp, sp = unit.cia_params, unit.sia_params
    cp.w_k, cp.b_k, cp.w_q, cp.b_q, sp.w_k, sp.b_k, sp.w_q, sp.b_q = tensors


# -- suite ----------------------------------------------------------------------------------


def _oracle_instances(count: int, seed: int = 11):
    """Random (graph, features, params, mask) draws over C in 3..64, m in 2..9, H in {1,2,4,8}."""
    r = np.random.default_rng(seed)
    rng = Rng(seed)
    for i in range(count):
        heads = [1, 2, 4, 8][i % 4]
        if i % 2 == 0:
            g = build_cyclic_channel_graph(int(r.integers(3, 65)))
            mask = None
        else:
            m = int(r.integers(2, 10))
            g = build_grid_spatial_graph(m)
            mask = sample_edge_drop(g, m, rng) if m >= 3 and i % 4 == 1 else None
        p = init_params(8, heads, rng)
        bsz = int(r.integers(1, 4))
        yield g, r.normal(size=(bsz, g.num_nodes, 1)), p, mask


def check_oracle_equivalence(count: int = 60, tol: float = 1e-10) -> tuple[bool, str]:
    worst = 0.0
    for g, x, p, mask in _oracle_instances(count):
        sparse = graph_attention(x, g, mask, p)
        dense = dense_attention_oracle(x, g, mask, p)
        worst = max(worst, float(np.abs(sparse.updated.data - dense.updated.data).max()),
                    float(np.abs(sparse.attn - dense.attn).max()))
    return worst <= tol, f"{count} instances, max abs diff {worst:.2e}"


def check_brute_force_cia(count: int = 100, tol: float = 1e-10) -> tuple[bool, str]:
    r = np.random.default_rng(5)
    worst = 0.0
    for i in range(count):
        c = int(r.integers(3, 65))
        unit = SteamUnit(SteamConfig(heads=[1, 2, 4, 8][i % 4]), Rng(i))
        x = r.normal(size=(c, 2, 3))
        _, alpha = cia(x, unit)
        ref = brute_force_cia(x, unit.channel_graph(c), unit.cia_params)
        worst = max(worst, float(np.abs(alpha.data - ref).max()))
    return worst <= tol, f"{count} instances, max abs diff {worst:.2e}"


def check_invariants() -> tuple[bool, str]:
    problems = []
    for m in range(2, 17):
        g = build_grid_spatial_graph(m)
        if g.num_undirected_edges() != 2 * m * (m - 1):
            problems.append(f"grid m={m} has {g.num_undirected_edges()} edges")
    for hops, deg in ((1, 2), (2, 4)):
        g = build_cyclic_channel_graph(16, hops)
        if set(g.degrees.tolist()) != {deg}:
            problems.append(f"cycle hops={hops} degrees {sorted(set(g.degrees.tolist()))}")
    rng = Rng(1)
    r = np.random.default_rng(1)
    counts = set()
    for c in (16, 64, 256):
        unit = SteamUnit(SteamConfig(), rng)
        counts.add(unit.num_params)
        out = unit(r.normal(size=(1, c, 7, 7)))
        if out.shape != (1, c, 7, 7):
            problems.append(f"C={c} output shape {out.shape}")
    if counts != {64}:
        problems.append(f"parameter counts {counts}")
    s = r.normal(size=(7, 7))
    for size in (7, 14, 21, 56):
        if not np.array_equal(ogp(upsample_repeat(s, size, size).data[None], 7).data, s):
            problems.append(f"OGP(upsample(s)) != s at {size}x{size}")
    for g, x, p, mask in _oracle_instances(8, seed=2):
        out = graph_attention(x, g, mask, p)
        if np.abs(out.attn.sum(axis=-1) - 1).max() > 1e-9:
            problems.append("attention rows not stochastic")
    unit = SteamUnit(SteamConfig(), Rng(2))
    x = Tensor(r.normal(size=(2, 8, 14, 14)) * 50)
    _, alpha = cia(x, unit)
    if not ((alpha.data > 0) & (alpha.data < 1)).all():
        problems.append("alpha_c outside (0, 1)")
    return not problems, "; ".join(problems) or "graphs, parameter counts, OGP round trip, stochasticity, score range"


def check_edge_drop() -> tuple[bool, str]:
    m = 7
    g = build_grid_spatial_graph(m)
    rng = Rng(3)
    inner = set(interior_nodes(m))
    for _ in range(20):
        mask = sample_edge_drop(g, m, rng)
        entries = mask.entries()
        if len(entries) != 25 or set(entries) != inner:
            return False, f"mask has {len(entries)} entries"
        if any(j not in g.neighbors[i] or j == i for i, j in entries.items()):
            return False, "mask names a non-neighbour"
    unit = SteamUnit(SteamConfig(m=m), Rng(4))
    x = np.random.default_rng(4).normal(size=(1, 8, 7, 7))
    a = unit(x, training=True, rng=Rng(10)).data
    b = unit(x, training=True, rng=Rng(11)).data
    e1, e2 = unit(x).data, unit(x).data
    if np.array_equal(a, b):
        return False, "training forwards with different seeds coincide"
    if not np.array_equal(e1, e2):
        return False, "eval forwards differ"
    if EdgeDropMask.none(m * m).edge_mask(g) is not None:
        return False, "inactive mask removes edges"
    return True, "25 valid drops per mask; train varies by seed; eval is pure"


def run_all(out=print) -> bool:
    """Run every check, print one PASS/FAIL line each, return overall success."""
    checks = []
    for name, (fn, inputs) in primitive_cases().items():
        checks.append((f"gradcheck {name}", lambda fn=fn, inputs=inputs: _gc(gradcheck(fn, inputs))))
    for arrangement in ("ca-sa", "sa-ca", "ca+sa"):
        checks.append((f"gradcheck steam_forward {arrangement}", lambda a=arrangement: _gc(steam_gradcheck(a))))
    checks += [("sparse vs dense attention oracle", check_oracle_equivalence),
               ("cia vs brute force", check_brute_force_cia),
               ("structural invariants", check_invariants),
               ("edge drop", check_edge_drop)]
    ok = True
    for name, check in checks:
        start = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}: {detail} [{time.perf_counter() - start:.2f}s]")
    return ok


def _gc(report: GradcheckReport) -> tuple[bool, str]:
    return report.passed, str(report)
