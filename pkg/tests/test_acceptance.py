"""Acceptance criteria 1-9, one test each.

Every test records a single PASS/FAIL line which is printed at the end of the
pytest run (see ``conftest.py``). ``python tests/test_acceptance.py`` runs the
same checks without pytest.
"""

import math
import sys
import time

import numpy as np
import pytest

from steam import autodiff as ad
from steam.attention import graph_attention
from steam.cli import load_splits, main
from steam.config import RunConfig, override
from steam.graph import build_cyclic_channel_graph, build_grid_spatial_graph, interior_nodes, sample_edge_drop
from steam.model import build_desk_cnn
from steam.rng import Rng
from steam.train import Schedule, train_epochs
from steam.unit import SteamConfig, SteamUnit, cia, ogp, spatial_scores, steam_forward, upsample_repeat
from steam.verify import (_oracle_instances, brute_force_cia, check_oracle_equivalence, gradcheck,
                          primitive_cases, steam_gradcheck)
from steam.zoo import BACKBONES, StageSpec, account, count_flops, plan_placement, runtime_flops

REFERENCE_RESNET50_GFLOPS = 3.57e-3
RESULTS: dict[int, str] = {}


class Criterion:
    """Collects named sub-checks and records one summary line."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.failures, self.notes = [], []
        self.start = time.perf_counter()

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.failures.append(what)

    def note(self, text: str) -> None:
        self.notes.append(text)

    def finish(self, budget_s: float) -> None:
        elapsed = time.perf_counter() - self.start
        self.check(elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:g}s")
        status = "FAIL" if self.failures else "PASS"
        detail = "; ".join(self.failures + self.notes)
        RESULTS[self.number] = f"criterion {self.number} {status}: {self.title} [{elapsed:.1f}s] {detail}".rstrip()
        print(RESULTS[self.number])
        assert not self.failures, RESULTS[self.number]


def test_criterion_1_parameter_accounting():
    c = Criterion(1, "parameter accounting")
    cases = [("resnet18", (2, 2, 2, 2), 256), ("resnet50", (3, 4, 6, 3), 320),
             ("resnet101", (3, 4, 23, 3), 576), ("shufflenet_v2", (4, 8, 4), 256)]
    for name, blocks, expected in cases:
        report = account(StageSpec(blocks), SteamConfig(d=8))
        c.check(report.added_params == expected, f"{blocks}: {report.added_params} != {expected}")
        c.check(BACKBONES[name].blocks_per_stage == blocks, f"{name} blocks {BACKBONES[name].blocks_per_stage}")
        c.check(account(BACKBONES[name], SteamConfig(d=8)).added_params == expected, f"{name} full spec")
    c.check(plan_placement(StageSpec((4, 8, 4))).units_per_stage == (1, 2, 1), "shufflenet plan")
    c.check(5 * (8 * 8) == account(StageSpec((3, 4, 6, 3))).added_params, "5 units x 8d")
    c.finish(1.0)


def test_criterion_2_placement():
    c = Criterion(2, "placement")
    p50 = plan_placement(StageSpec((3, 4, 6, 3)))
    c.check(p50.units_per_stage == (1, 1, 2, 1), f"resnet50 units {p50.units_per_stage}")
    c.check(p50.insertion_indices[2] == (3, 6), f"stage-3 insertions {p50.insertion_indices[2]}")
    c.check(p50.describe().startswith("units: [1,1,2,1]; stage-3 insertions after blocks 3,6"), p50.describe())
    for blocks, units in (((2, 2, 2, 2), (1, 1, 1, 1)), ((3, 4, 23, 3), (1, 1, 6, 1))):
        got = plan_placement(StageSpec(blocks)).units_per_stage
        c.check(got == units, f"{blocks}: {got} != {units}")
    for blocks in ((2, 2, 2, 2), (3, 4, 6, 3), (3, 4, 23, 3), (4, 8, 4)):
        plan = plan_placement(StageSpec(blocks))
        for n, idx, u in zip(blocks, plan.insertion_indices, plan.units_per_stage):
            c.check(len(idx) == u == math.ceil(n / 4) and idx[-1] == n, f"{blocks}: stage insertions {idx}")
    c.finish(1.0)


def test_criterion_3_flop_sanity():
    c = Criterion(3, "FLOP sanity")
    spec, cfg = BACKBONES["resnet50"], SteamConfig()
    plan = plan_placement(spec)
    analytic = count_flops(plan, spec, cfg)
    runtime = runtime_flops(plan, spec, cfg)
    ratio = analytic / 1e9 / REFERENCE_RESNET50_GFLOPS
    c.check(analytic == runtime, f"analytic {analytic:.0f} != runtime {runtime:.0f}")
    c.check(0.5 <= ratio <= 2.0, f"analytic {analytic / 1e9:.4e} GFLOPs is {ratio:.2f}x the reference "
                                 f"{REFERENCE_RESNET50_GFLOPS:g} (factor-2 band)")
    c.note(f"analytic == runtime == {analytic:.0f} FLOPs")
    c.finish(10.0)


def test_criterion_4_oracle_equivalence():
    c = Criterion(4, "sparse vs dense oracle")
    cycles, grids, heads = [], [], set()
    for g, _, p, _ in _oracle_instances(60):
        heads.add(p.heads)
        if g.degrees.max() > 2:
            grids.append(round(math.sqrt(g.num_nodes)))
        else:
            cycles.append(g.num_nodes)
    ok, detail = check_oracle_equivalence(60, tol=1e-10)
    c.check(ok, detail)
    c.check(heads == {1, 2, 4, 8}, f"heads covered {sorted(heads)}")
    c.check(min(cycles) >= 3 and max(cycles) <= 64 and min(grids) >= 3 and max(grids) <= 9, "instance ranges")
    c.note(f"{detail}; C in {min(cycles)}..{max(cycles)}, m in {min(grids)}..{max(grids)}")
    c.finish(60.0)


def test_criterion_5_gradients():
    c = Criterion(5, "gradient correctness")
    worst = 0.0
    for name, (fn, inputs) in primitive_cases().items():
        rep = gradcheck(fn, inputs)
        worst = max(worst, rep.max_rel_error)
        c.check(rep.max_rel_error < 1e-4, f"{name}: {rep}")
    for arrangement in ("ca-sa", "sa-ca", "ca+sa"):
        rep = steam_gradcheck(arrangement)
        worst = max(worst, rep.max_rel_error)
        c.check(rep.max_rel_error < 1e-4, f"steam_forward {arrangement}: {rep}")
    c.note(f"{len(primitive_cases())} primitives + 3 arrangements, worst rel err {worst:.2e}")
    c.finish(300.0)


def test_criterion_6_structural_invariants():
    c = Criterion(6, "structural invariants")
    r = np.random.default_rng(6)
    for g, x, p, mask in _oracle_instances(40, seed=6):
        attn = graph_attention(x, g, mask, p).attn
        c.check(np.abs(attn.sum(axis=-1) - 1).max() <= 1e-9, "attention row sums")
    unit = SteamUnit(SteamConfig(), Rng(6))
    for p in unit.parameters():
        p.data = r.normal(size=p.shape) * 3
    x = ad.Tensor(r.normal(size=(2, 16, 14, 14)) * 40)
    _, alpha_c = cia(x, unit)
    alpha_s = spatial_scores(ad.tanh(x), unit, training=False, rng=None)
    for name, a in (("alpha_c", alpha_c.data), ("alpha_s", alpha_s.data)):
        c.check(((a > 0) & (a < 1)).all(), f"{name} outside (0, 1)")
    for m in range(2, 17):
        g = build_grid_spatial_graph(m)
        c.check(g.num_undirected_edges() == 2 * m * (m - 1), f"grid m={m}")
    for hops, deg in ((1, 2), (2, 4)):
        for n in (5, 16, 64):
            c.check(set(build_cyclic_channel_graph(n, hops).degrees.tolist()) == {deg}, f"cycle hops={hops}")
    counts = set()
    for ch in (16, 64, 256):
        u = SteamUnit(SteamConfig(), Rng(ch))
        counts.add(u.num_params)
        c.check(u(r.normal(size=(1, ch, 7, 7))).shape == (1, ch, 7, 7), f"C={ch} shape")
    c.check(counts == {64}, f"parameter counts {counts}")
    s = r.normal(size=(3, 7, 7))
    for size in (7, 14, 28, 56):
        back = ogp(upsample_repeat(s, size, size).data[:, None].repeat(4, axis=1), 7).data
        c.check(np.array_equal(back, s), f"OGP round trip at {size}")
    c.finish(30.0)


def _train_cli(data_dir, out, epochs, resume=None):
    args = ["train", "--data", str(data_dir), "--epochs", str(epochs), "--seed", "7",
            "--train-size", "600", "--val-size", "200", "--out", str(out)]
    if resume:
        args += ["--resume", str(resume)]
    assert main(args) == 0


def test_criterion_7_determinism(data_dir, tmp_path):
    c = Criterion(7, "determinism")
    _train_cli(data_dir, tmp_path / "a", 2)
    _train_cli(data_dir, tmp_path / "b", 2)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    c.check(a == (tmp_path / "b" / "metrics.csv").read_bytes(), "two fixed-seed runs differ")
    _train_cli(data_dir, tmp_path / "r", 1)
    _train_cli(data_dir, tmp_path / "r", 2, resume=tmp_path / "r" / "epoch001.ckpt")
    c.check(a == (tmp_path / "r" / "metrics.csv").read_bytes(), "resumed run differs")
    c.check((tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "r" / "last.ckpt").read_bytes(),
            "final checkpoints differ")
    c.note("metrics CSVs and final checkpoints bitwise identical")
    c.finish(300.0)


def _smoke(cfg: RunConfig, steam):
    rng = Rng(cfg.train.seed)
    train, val = load_splits(cfg, rng)
    model = build_desk_cnn(cfg.model.stage_spec(), steam, rng)
    hist = train_epochs(model, train, val, Schedule.scaled(cfg.train.lr, cfg.train.epochs),
                        cfg.train.epochs, rng, cfg.train.batch_size)
    return model, train, val, hist


@pytest.mark.slow
def test_criterion_8_smoke_training(data_dir):
    c = Criterion(8, "smoke training")
    cfg = override(RunConfig(), data={"dir": str(data_dir)})
    steam = SteamConfig(arrangement="ca-sa", d=8, heads=4, m=7, edge_drop=True)
    spec = cfg.model.stage_spec()
    c.check(spec.channels_per_stage == (8, 16, 32) and len(spec.blocks_per_stage) == 3, f"spec {spec}")
    model, train, val, hist = _smoke(cfg, steam)
    c.check(len(train) == 5000 and len(val) == 1000, f"split sizes {len(train)}/{len(val)}")
    c.check(cfg.train.epochs <= 10, "epoch budget")
    best = max(e.val_acc for e in hist.epochs)
    first, last = hist.epochs[0].train_loss, hist.epochs[-1].train_loss
    c.check(best >= 0.95, f"best val top-1 {best:.4f} < 0.95")
    c.check(math.isfinite(last) and last <= first, f"final loss {last:.4f} vs epoch-1 {first:.4f}")
    c.note(f"val top-1 {hist.epochs[-1].val_acc:.4f} (best {best:.4f}), loss {first:.4f} -> {last:.4f}, "
           f"{model.steam_params} STEAM params")
    c.finish(900.0)


@pytest.mark.slow
def test_criterion_8_baseline_report(data_dir):
    """The no-STEAM baseline is reported only; it never fails."""
    start = time.perf_counter()
    cfg = override(RunConfig(), data={"dir": str(data_dir)})
    _, _, _, hist = _smoke(cfg, None)
    line = (f"criterion 8 baseline (non-binding): no-STEAM val top-1 {hist.epochs[-1].val_acc:.4f}, "
            f"final loss {hist.epochs[-1].train_loss:.4f} [{time.perf_counter() - start:.1f}s]")
    RESULTS["8-baseline"] = line
    print(line)


def test_criterion_9_edge_drop():
    c = Criterion(9, "edge drop")
    m = 7
    g = build_grid_spatial_graph(m)
    inner = set(interior_nodes(m))
    rng = Rng(9)
    for _ in range(200):
        entries = sample_edge_drop(g, m, rng).entries()
        c.check(len(entries) == 25 and set(entries) == inner, f"mask with {len(entries)} entries")
        c.check(all(j in g.neighbors[i] and j != i for i, j in entries.items()), "mask names a non-neighbour")
    r = np.random.default_rng(9)
    for arrangement in ("ca-sa", "sa-ca", "ca+sa"):
        unit = SteamUnit(SteamConfig(arrangement=arrangement, m=m), Rng(1))
        for p in unit.parameters():
            p.data = r.normal(size=p.shape)
        x = r.normal(size=(2, 8, 14, 14))
        a = steam_forward(x, unit, training=True, rng=Rng(100)).data
        b = steam_forward(x, unit, training=True, rng=Rng(101)).data
        c.check(not np.array_equal(a, b), f"{arrangement}: training forwards with different seeds coincide")
        e1, e2 = steam_forward(x, unit).data, steam_forward(x, unit).data
        c.check(np.array_equal(e1, e2), f"{arrangement}: eval forwards differ")
        c.check(unit.last_mask is None, f"{arrangement}: eval sampled a mask")
    c.finish(10.0)


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    data = Path(__file__).resolve().parents[1] / "data" / "mnist-desk"
    runs = [test_criterion_1_parameter_accounting, test_criterion_2_placement, test_criterion_3_flop_sanity,
            test_criterion_4_oracle_equivalence, test_criterion_5_gradients, test_criterion_6_structural_invariants,
            lambda: test_criterion_7_determinism(data, Path(tempfile.mkdtemp())),
            lambda: test_criterion_8_smoke_training(data), lambda: test_criterion_8_baseline_report(data),
            test_criterion_9_edge_drop]
    failed = 0
    for run in runs:
        try:
            run()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
