import numpy as np
import pytest

from steam.errors import DimensionError, ParameterError
from steam.graph import (EdgeDropMask, Graph, build_cyclic_channel_graph, build_grid_spatial_graph,
                         build_knn_correlation_graph, interior_nodes, sample_edge_drop)
from steam.rng import Rng


def test_cycle_c4():
    g = build_cyclic_channel_graph(4)
    assert g.neighbors == ((1, 3), (0, 2), (1, 3), (0, 2))


def test_cycle_c3_is_complete():
    g = build_cyclic_channel_graph(3)
    assert g.neighbors == ((1, 2), (0, 2), (0, 1))


def test_two_hop_cycle():
    assert build_cyclic_channel_graph(6, hops=2).neighbors[0] == (1, 2, 4, 5)


@pytest.mark.parametrize("c,hops", [(2, 1), (4, 2), (1, 1)])
def test_cycle_minimum_size(c, hops):
    with pytest.raises(ParameterError):
        build_cyclic_channel_graph(c, hops)


@pytest.mark.parametrize("c", [3, 5, 16, 64, 257])
def test_cycle_is_single_symmetric_cycle(c):
    g = build_cyclic_channel_graph(c)
    assert (g.degrees == 2).all() and g.is_symmetric() and not g.has_self_loops()
    assert g.num_undirected_edges() == c
    # walk the cycle: it must visit every node before returning
    prev, cur, seen = None, 0, {0}
    for _ in range(c - 1):
        nxt = [j for j in g.neighbors[cur] if j != prev][0]
        prev, cur = cur, nxt
        seen.add(cur)
    assert len(seen) == c


def test_grid_m7():
    g = build_grid_spatial_graph(7)
    assert g.num_nodes == 49 and g.num_undirected_edges() == 84
    hist = dict(zip(*np.unique(g.degrees, return_counts=True)))
    assert hist == {2: 4, 3: 20, 4: 25}


def test_grid_small():
    g = build_grid_spatial_graph(2)
    assert g.num_nodes == 4 and g.num_undirected_edges() == 4 and (g.degrees == 2).all()
    assert build_grid_spatial_graph(3).degrees.sum() == 24


@pytest.mark.parametrize("m", range(2, 17))
def test_grid_edge_count_and_symmetry(m):
    g = build_grid_spatial_graph(m)
    assert g.num_undirected_edges() == 2 * m * (m - 1)
    assert g.is_symmetric() and not g.has_self_loops()


def test_grid_rejects_m1():
    with pytest.raises(ParameterError):
        build_grid_spatial_graph(1)


def test_self_loop_flag():
    g = build_grid_spatial_graph(3, include_self_loops=True)
    assert g.has_self_loops() and all(i in nb for i, nb in enumerate(g.neighbors))


def test_graph_validation():
    with pytest.raises(ParameterError):
        Graph(2, ((1,), (5,)))
    with pytest.raises(ParameterError):
        Graph(2, ((1, 1), (0,)))


def test_edge_drop_m2_is_empty():
    g = build_grid_spatial_graph(2)
    mask = sample_edge_drop(g, 2, Rng(0))
    assert len(mask) == 0 and mask.edge_mask(g) is None


@pytest.mark.parametrize("seed", range(10))
def test_edge_drop_m7(seed):
    g = build_grid_spatial_graph(7)
    mask = sample_edge_drop(g, 7, Rng(seed))
    entries = mask.entries()
    assert len(entries) == 25 and set(entries) == set(interior_nodes(7))
    for i, j in entries.items():
        assert j in g.neighbors[i]
    keep = mask.edge_mask(g)
    assert (~keep).sum() == 25


def test_edge_drop_deterministic_and_roughly_uniform():
    g = build_grid_spatial_graph(3)
    assert sample_edge_drop(g, 3, Rng(9)) == sample_edge_drop(g, 3, Rng(9))
    rng = Rng(1)
    counts = {j: 0 for j in g.neighbors[4]}
    for _ in range(4000):
        counts[sample_edge_drop(g, 3, rng).entries()[4]] += 1
    assert all(900 < c < 1100 for c in counts.values())


def test_inactive_mask_changes_nothing():
    g = build_grid_spatial_graph(5)
    assert EdgeDropMask.none(25).edge_mask(g) is None
    assert EdgeDropMask.none(25).entries() == {}


def test_mask_rejects_non_neighbor():
    g = build_grid_spatial_graph(3)
    dropped = [-1] * 9
    dropped[4] = 0  # corner is not adjacent to the centre
    with pytest.raises(ParameterError):
        EdgeDropMask(tuple(dropped)).edge_mask(g)


def test_knn_example():
    g = build_knn_correlation_graph(np.array([[1.0, 0], [1, 0], [0, 1]]), 1)
    assert g.neighbors == ((1,), (0,), (0,))


def test_knn_full_and_duplicates(nprng):
    x = nprng.normal(size=(6, 10))
    g = build_knn_correlation_graph(x, 5)
    assert all(nb == tuple(j for j in range(6) if j != i) for i, nb in enumerate(g.neighbors))
    x[3] = x[1] * 10
    x[1] *= 10
    g = build_knn_correlation_graph(x, 1)
    assert g.neighbors[1] == (3,) and g.neighbors[3] == (1,)


def test_knn_errors():
    with pytest.raises(ParameterError):
        build_knn_correlation_graph(np.ones((3, 2)), 3)
    with pytest.raises(DimensionError):
        build_knn_correlation_graph(np.ones(3), 1)
