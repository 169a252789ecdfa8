"""Channel, spatial and k-NN graph construction plus edge-drop masks."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DimensionError, ParameterError
from .rng import Rng


@dataclass(frozen=True)
class Graph:
    """Immutable adjacency list; ``neighbors[i]`` is sorted ascending."""

    num_nodes: int
    neighbors: tuple

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ParameterError(f"graph needs at least one node, got {self.num_nodes}")
        if len(self.neighbors) != self.num_nodes:
            raise ParameterError("neighbor list length must equal num_nodes")
        for i, nb in enumerate(self.neighbors):
            if any(j < 0 or j >= self.num_nodes for j in nb):
                raise ParameterError(f"node {i} has out-of-range neighbor in {nb}")
            if list(nb) != sorted(set(nb)):
                raise ParameterError(f"neighbors of node {i} must be sorted and unique: {nb}")

    @classmethod
    def from_lists(cls, lists) -> "Graph":
        return cls(len(lists), tuple(tuple(sorted(set(int(j) for j in nb))) for nb in lists))

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.array([len(nb) for nb in self.neighbors], dtype=np.intp)

    @cached_property
    def src(self) -> np.ndarray:
        """Source node of each directed edge (edges grouped by source)."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    @cached_property
    def dst(self) -> np.ndarray:
        return np.array([j for nb in self.neighbors for j in nb], dtype=np.intp)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.degrees)[:-1]]).astype(np.intp)

    @property
    def num_directed_edges(self) -> int:
        return int(self.degrees.sum())

    def has_self_loops(self) -> bool:
        return any(i in nb for i, nb in enumerate(self.neighbors))

    def is_symmetric(self) -> bool:
        pairs = set(zip(self.src.tolist(), self.dst.tolist()))
        return all((j, i) in pairs for i, j in pairs)

    def num_undirected_edges(self) -> int:
        """Edge count of a symmetric graph, self-loops excluded."""
        return sum(1 for i, j in zip(self.src, self.dst) if i < j)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        a[self.src, self.dst] = True
        return a


def _with_self_loops(lists, enabled: bool):
    if enabled:
        for i, nb in enumerate(lists):
            nb.add(i)
    return lists


def build_cyclic_channel_graph(num_channels: int, hops: int = 1,
                               include_self_loops: bool = False) -> Graph:
    """Cycle over channels; each node links to its ``hops`` predecessors and successors."""
    if hops not in (1, 2):
        raise ParameterError(f"hops must be 1 or 2, got {hops}")
    minimum = 2 * hops + 1
    if num_channels < minimum:
        raise ParameterError(f"cyclic graph with hops={hops} needs C >= {minimum}, got C={num_channels}")
    lists = [{(i + s) % num_channels for s in range(-hops, hops + 1) if s} for i in range(num_channels)]
    return Graph.from_lists(_with_self_loops(lists, include_self_loops))


def build_grid_spatial_graph(m: int, include_self_loops: bool = False) -> Graph:
    """4-adjacency grid over ``m*m`` cells in row-major order."""
    if m < 2:
        raise ParameterError(f"grid side must be >= 2, got m={m}")
    lists = []
    for r in range(m):
        for c in range(m):
            nb = set()
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < m and 0 <= cc < m:
                    nb.add(rr * m + cc)
            lists.append(nb)
    return Graph.from_lists(_with_self_loops(lists, include_self_loops))


def build_knn_correlation_graph(x, k: int) -> Graph:
    """Directed k-NN graph from the correlation matrix ``x @ x.T`` of (C, H*W) features.

    Self-similarity is excluded; ties go to the lower index.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"k-NN graph expects (C, H*W) features, got shape {x.shape}")
    c = x.shape[0]
    if not 1 <= k < c:
        raise ParameterError(f"k must satisfy 1 <= k < C={c}, got k={k}")
    corr = x @ x.T
    lists = []
    for i in range(c):
        cand = [j for j in range(c) if j != i]
        # stable sort on -score keeps ascending index order among ties
        cand.sort(key=lambda j: -corr[i, j])
        lists.append(cand[:k])
    return Graph.from_lists(lists)


@dataclass(frozen=True)
class EdgeDropMask:
    """Per-node dropped neighbor (-1 when none); inactive masks drop nothing."""

    dropped: tuple
    active: bool = True

    @classmethod
    def none(cls, num_nodes: int) -> "EdgeDropMask":
        return cls(tuple([-1] * num_nodes), active=False)

    @property
    def num_nodes(self) -> int:
        return len(self.dropped)

    def entries(self) -> dict:
        """``{node: dropped_neighbor}`` for nodes with a drop."""
        if not self.active:
            return {}
        return {i: j for i, j in enumerate(self.dropped) if j >= 0}

    def __len__(self) -> int:
        return len(self.entries())

    def edge_mask(self, g: Graph) -> np.ndarray | None:
        """Boolean keep-mask over ``g``'s directed edges, or None if nothing is dropped."""
        drops = self.entries()
        if not drops:
            return None
        if self.num_nodes != g.num_nodes:
            raise DimensionError(f"mask covers {self.num_nodes} nodes, graph has {g.num_nodes}")
        keep = np.ones(g.num_directed_edges, dtype=bool)
        for i, j in drops.items():
            nb = g.neighbors[i]
            if j not in nb:
                raise ParameterError(f"dropped neighbor {j} is not adjacent to node {i}")
            keep[g.offsets[i] + nb.index(j)] = False
        return keep


def interior_nodes(m: int) -> list:
    return [r * m + c for r in range(1, m - 1) for c in range(1, m - 1)]


def sample_edge_drop(g: Graph, m: int, rng: Rng) -> EdgeDropMask:
    """Drop one uniformly chosen neighbor for each interior node of an ``m x m`` grid."""
    if g.num_nodes != m * m:
        raise DimensionError(f"graph has {g.num_nodes} nodes, expected m*m = {m * m}")
    dropped = [-1] * g.num_nodes
    for i in interior_nodes(m):
        cand = [j for j in g.neighbors[i] if j != i]
        dropped[i] = cand[rng.randint(len(cand))]
    return EdgeDropMask(tuple(dropped), active=True)
