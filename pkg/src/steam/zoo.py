"""Backbone stage specs, adaptive STEAM placement, and parameter/FLOP accounting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import FLOP_CONVENTIONS, FlopCounter, Tensor, no_grad
from .errors import ConfigError, ParameterError
from .rng import Rng
from .unit import SteamConfig, SteamUnit, unit_flops

PLACEMENT_POLICIES = ("adaptive", "every-block", "last-stage", "per-stage")


@dataclass(frozen=True)
class StageSpec:
    blocks_per_stage: tuple
    channels_per_stage: tuple = ()
    spatial_per_stage: tuple = ()  # ((H, W), ...)
    name: str = "custom"

    def __post_init__(self):
        s = len(self.blocks_per_stage)
        if s == 0:
            raise ConfigError("stage spec needs at least one stage")
        if any(int(n) < 1 for n in self.blocks_per_stage):
            raise ConfigError(f"blocks per stage must be positive: {self.blocks_per_stage}")
        for label, seq in (("channels", self.channels_per_stage), ("spatial", self.spatial_per_stage)):
            if seq and len(seq) != s:
                raise ConfigError(f"{label} list has {len(seq)} entries for {s} stages")
        object.__setattr__(self, "blocks_per_stage", tuple(int(n) for n in self.blocks_per_stage))
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        object.__setattr__(self, "spatial_per_stage",
                           tuple((int(hw[0]), int(hw[1])) for hw in self.spatial_per_stage))

    @property
    def num_stages(self) -> int:
        return len(self.blocks_per_stage)

    def to_dict(self) -> dict:
        return {"name": self.name, "blocks": list(self.blocks_per_stage),
                "channels": list(self.channels_per_stage),
                "spatial": [list(hw) for hw in self.spatial_per_stage]}


def _resnet(name, blocks, channels):
    return StageSpec(blocks, channels, ((56, 56), (28, 28), (14, 14), (7, 7)), name)


# Output channels and spatial sizes of each stage at 224x224 input.
BACKBONES = {
    "resnet18": _resnet("resnet18", (2, 2, 2, 2), (64, 128, 256, 512)),
    "resnet34": _resnet("resnet34", (3, 4, 6, 3), (64, 128, 256, 512)),
    "resnet50": _resnet("resnet50", (3, 4, 6, 3), (256, 512, 1024, 2048)),
    "resnet101": _resnet("resnet101", (3, 4, 23, 3), (256, 512, 1024, 2048)),
    "shufflenet_v2": StageSpec((4, 8, 4), (116, 232, 464), ((28, 28), (14, 14), (7, 7)), "shufflenet_v2"),
    "desk": StageSpec((1, 1, 1), (8, 16, 32), ((28, 28), (14, 14), (7, 7)), "desk"),
}


@dataclass(frozen=True)
class PlacementPlan:
    units_per_stage: tuple
    insertion_indices: tuple  # per stage, 1-based block indices followed by a unit

    @property
    def total_units(self) -> int:
        return sum(self.units_per_stage)

    def positions(self):
        """Yield ``(stage, block)`` pairs, both 0-based, after which a unit sits."""
        for s, idx in enumerate(self.insertion_indices):
            for b in idx:
                yield s, b - 1

    def describe(self) -> str:
        """One-line summary; stages holding a single end-of-stage unit are implied."""
        units = ",".join(str(u) for u in self.units_per_stage)
        parts = [f"stage-{s + 1} insertions after blocks {','.join(str(i) for i in idx)}"
                 for s, idx in enumerate(self.insertion_indices) if len(idx) > 1]
        return f"units: [{units}]; " + ("; ".join(parts) if parts else "every unit at its stage end")

    def describe_stages(self) -> list:
        return [f"stage-{s + 1}: {len(idx)} unit(s) after block(s) {','.join(str(i) for i in idx) or '-'}"
                for s, idx in enumerate(self.insertion_indices)]


def _spread(n_blocks: int, units: int) -> tuple:
    """One unit after the last block, the rest after blocks ceil(j*N/u)."""
    if units == 0:
        return ()
    return tuple(-(-j * n_blocks // units) for j in range(1, units)) + (n_blocks,)


def plan_placement(spec: StageSpec, policy: str = "adaptive") -> PlacementPlan:
    blocks = spec.blocks_per_stage
    if policy == "adaptive":
        units = [math.ceil(n / 4) for n in blocks]
    elif policy == "every-block":
        units = list(blocks)
    elif policy == "last-stage":
        units = [0] * (len(blocks) - 1) + [blocks[-1]]
    elif policy == "per-stage":
        units = [1] * len(blocks)
    else:
        raise ParameterError(f"placement policy must be one of {PLACEMENT_POLICIES}, got {policy!r}")
    return PlacementPlan(tuple(units), tuple(_spread(n, u) for n, u in zip(blocks, units)))


def count_params(plan: PlacementPlan, d: int = 8) -> int:
    return plan.total_units * 8 * d


def count_flops(plan: PlacementPlan, spec: StageSpec, cfg: SteamConfig) -> float:
    """Analytic FLOPs added by every planned unit (single image, eval mode)."""
    if plan.total_units and (not spec.channels_per_stage or not spec.spatial_per_stage):
        raise ConfigError("FLOP accounting needs channels and spatial sizes for every stage")
    total = 0
    for s, units in enumerate(plan.units_per_stage):
        if units:
            (h, w), c = spec.spatial_per_stage[s], spec.channels_per_stage[s]
            total += units * unit_flops(c, h, w, cfg)
    return float(total)


def runtime_flops(plan: PlacementPlan, spec: StageSpec, cfg: SteamConfig, seed: int = 0) -> float:
    """Execute every planned unit on a random map of its insertion shape and count FLOPs."""
    rng = Rng(seed)
    data_rng = np.random.default_rng(seed)  # values do not affect the count
    counter = FlopCounter()
    for s, _ in plan.positions():
        (h, w), c = spec.spatial_per_stage[s], spec.channels_per_stage[s]
        unit = SteamUnit(cfg, rng)
        x = Tensor(data_rng.standard_normal((1, c, h, w)))
        with no_grad(), counter.active():
            unit(x, training=False)
    return float(counter.total)


# -- reference parameter formulas ------------------------------------------------------


def _eca_kernel(c: int) -> int:
    t = int(abs((math.log2(c) + 1) / 2))
    return t if t % 2 else t + 1


def reference_param_table(spec: StageSpec, d: int = 8, r=None, k=None,
                          plan: PlacementPlan | None = None) -> list:
    """Closed-form parameter counts of comparable attention modules for ``spec``.

    SE/CBAM need the reduction ratio ``r`` and CBAM the spatial kernel ``k``.
    Modules other than STEAM are counted once per block.
    """
    if r is None or k is None:
        raise ParameterError("reduction ratio r and kernel size k are required for the SE/CBAM rows")
    if not spec.channels_per_stage:
        raise ConfigError("reference table needs channels_per_stage")
    n, c = spec.blocks_per_stage, spec.channels_per_stage
    pairs = list(zip(n, c))
    plan = plan or plan_placement(spec)
    return [
        ("SE", sum(2.0 / r * ns * cs ** 2 for ns, cs in pairs)),
        ("GCT", float(sum(n))),
        ("ECA", float(sum(ns * _eca_kernel(cs) for ns, cs in pairs))),
        ("CBAM", sum(ns * (cs ** 2 * 2.0 / r + k ** 2) for ns, cs in pairs)),
        ("MCA", float(sum(ns * cs * 2 for ns, cs in pairs))),
        ("STEAM", float(count_params(plan, d))),
    ]


# -- report -----------------------------------------------------------------------------


@dataclass
class AccountingReport:
    spec: StageSpec
    cfg: SteamConfig
    plan: PlacementPlan
    added_params: int
    added_flops: float
    per_stage: list = field(default_factory=list)
    reference: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["# FLOP conventions: " + "; ".join(FLOP_CONVENTIONS),
                 f"backbone: {self.spec.name}  d={self.cfg.d}  heads={self.cfg.heads}  "
                 f"arrangement={self.cfg.arrangement}  m={self.cfg.m}",
                 self.plan.describe(),
                 f"added params: {self.added_params}",
                 f"added GFLOPs: {self.added_flops / 1e9:.4e}",
                 "",
                 f"{'stage':>5} {'blocks':>6} {'units':>5} {'after':>12} {'C':>6} {'HxW':>9} "
                 f"{'params':>7} {'FLOPs':>12}"]
        for row in self.per_stage:
            after = ",".join(str(i) for i in row["insertions"]) or "-"
            hw = f"{row['h']}x{row['w']}" if row["h"] else "-"
            lines.append(f"{row['stage']:>5} {row['blocks']:>6} {row['units']:>5} {after:>12} "
                         f"{row['channels'] or '-':>6} {hw:>9} {row['params']:>7} {row['flops']:>12.0f}")
        if self.reference:
            lines += ["", f"{'module':<6} {'params':>14}"]
            lines += [f"{name:<6} {value:>14.1f}" for name, value in self.reference]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "blocks", "units", "insertions", "channels", "h", "w", "params", "flops"])
        for row in self.per_stage:
            writer.writerow([row["stage"], row["blocks"], row["units"],
                             " ".join(str(i) for i in row["insertions"]),
                             row["channels"], row["h"], row["w"], row["params"], row["flops"]])
        writer.writerow(["total", sum(self.spec.blocks_per_stage), self.plan.total_units, "",
                         "", "", "", self.added_params, self.added_flops])
        for name, value in self.reference:
            writer.writerow([f"ref:{name}", "", "", "", "", "", "", value, ""])
        return buf.getvalue()


def account(spec: StageSpec, cfg: SteamConfig | None = None, policy: str = "adaptive",
            r=None, k=None) -> AccountingReport:
    cfg = cfg or SteamConfig()
    plan = plan_placement(spec, policy)
    have_shapes = bool(spec.channels_per_stage and spec.spatial_per_stage)
    rows = []
    for s, units in enumerate(plan.units_per_stage):
        c = spec.channels_per_stage[s] if spec.channels_per_stage else 0
        h, w = spec.spatial_per_stage[s] if spec.spatial_per_stage else (0, 0)
        flops = units * unit_flops(c, h, w, cfg) if units and have_shapes else 0
        rows.append({"stage": s + 1, "blocks": spec.blocks_per_stage[s], "units": units,
                     "insertions": plan.insertion_indices[s], "channels": c, "h": h, "w": w,
                     "params": units * 8 * cfg.d, "flops": flops})
    reference = []
    if r is not None and k is not None and spec.channels_per_stage:
        reference = reference_param_table(spec, cfg.d, r, k, plan)
    return AccountingReport(spec, cfg, plan, count_params(plan, cfg.d),
                            float(sum(row["flops"] for row in rows)), rows, reference)
