import numpy as np
import pytest

from steam import autodiff as ad
from steam.attention import init_params
from steam.autodiff import Tensor
from steam.errors import ContractError
from steam.graph import build_cyclic_channel_graph
from steam.rng import Rng
from steam.unit import SteamConfig, SteamUnit, cia
from steam.verify import (brute_force_cia, check_brute_force_cia, check_edge_drop, check_invariants,
                          check_oracle_equivalence, gradcheck, primitive_cases, rel_error, run_all,
                          steam_gradcheck)


def test_sum_of_squares_exact(nprng):
    x = nprng.normal(size=(3, 4))
    rep = gradcheck(lambda t: ad.sum_(t * t), [x])
    assert rep.passed and rep.max_rel_error < 1e-9


def test_corrupted_backward_fails(nprng):
    def bad_exp(t):
        out = np.exp(t.data)
        return ad._make(out, (t,), lambda g: (1.01 * g * out,), "exp")  # 1% off

    rep = gradcheck(lambda t: ad.sum_(bad_exp(t)), [nprng.normal(size=5)])
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.01 / 1.01, rel=1e-4)
    assert "max rel err" in str(rep)


def test_contract_errors():
    with pytest.raises(ContractError, match="scalar"):
        gradcheck(lambda t: t * 2, [np.ones(3)])
    with pytest.raises(ContractError, match="finite"):
        gradcheck(lambda t: ad.sum_(t), [np.array([1.0, np.nan])])


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert rel_error(2.0, 1.0) == 0.5


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_primitive_gradients(name):
    fn, inputs = primitive_cases()[name]
    rep = gradcheck(fn, inputs)
    assert rep.passed, f"{name}: {rep}"


@pytest.mark.parametrize("arrangement", ["ca-sa", "sa-ca", "ca+sa"])
def test_full_steam_forward_gradient(arrangement):
    rep = steam_gradcheck(arrangement)
    assert rep.passed, str(rep)


def test_brute_force_matches_cia_on_100_instances():
    ok, msg = check_brute_force_cia(100, tol=1e-10)
    assert ok, msg


def test_uniform_input_gives_uniform_alpha():
    unit = SteamUnit(SteamConfig(), Rng(0))
    for p in unit.parameters():
        p.data = np.random.default_rng(1).normal(size=p.shape)
    x = np.full((9, 3, 3), 0.7)
    alpha = brute_force_cia(x, build_cyclic_channel_graph(9), unit.cia_params)
    np.testing.assert_allclose(alpha, alpha[0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(alpha, 1 / (1 + np.exp(-0.7)), atol=1e-15)


def test_identical_heads_equal_single_head(nprng):
    single = init_params(2, 1, Rng(4))
    multi = init_params(8, 4, Rng(5))
    for name in ("w_k", "b_k", "w_q", "b_q"):
        src = getattr(single, name).data
        getattr(multi, name).data = np.tile(src, (1, 4)) if src.ndim == 2 else np.tile(src, 4)
    g = build_cyclic_channel_graph(11)
    x = nprng.normal(size=(11, 2, 2))
    np.testing.assert_allclose(brute_force_cia(x, g, multi), brute_force_cia(x, g, single), atol=1e-15)


def test_brute_force_accepts_neighbour_lists(nprng):
    unit = SteamUnit(SteamConfig(), Rng(2))
    x = nprng.normal(size=(6, 2, 2))
    lists = [[(i - 1) % 6, (i + 1) % 6] for i in range(6)]
    np.testing.assert_allclose(brute_force_cia(x, lists, unit.cia_params), cia(x, unit)[1].data, atol=1e-12)


def test_suite_checks():
    for check in (lambda: check_oracle_equivalence(20), check_invariants, check_edge_drop):
        ok, msg = check()
        assert ok, msg


def test_run_all_reports_lines():
    lines = []
    assert run_all(out=lines.append)
    assert lines and all(line.startswith(("PASS", "FAIL")) for line in lines)
    assert not any(line.startswith("FAIL") for line in lines)
