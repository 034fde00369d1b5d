"""Network graphs and stochastic combination matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

STOCHASTICITY = ("left", "right", "doubly")
SUM_TOL = 1e-12


class TopologyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NetworkTopology:
    """Undirected connected graph over ``n_nodes`` agents.

    ``adjacency[k, l]`` is True when ``l`` is in the neighborhood of ``k``.
    Every node is its own neighbor.
    """

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise TopologyError(f"adjacency must be a non-empty square matrix, got shape {adj.shape}")
        if not np.array_equal(adj, adj.T):
            raise TopologyError("adjacency is not symmetric")
        np.fill_diagonal(adj, True)
        n_comp, labels = connected_components(adj, directed=False)
        if n_comp != 1:
            isolated = [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]
            raise TopologyError(f"graph is disconnected: {n_comp} components {isolated}")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degree(self) -> np.ndarray:
        """Neighbor count excluding self."""
        return self.adjacency.sum(axis=1) - 1

    def neighbors(self, k: int, include_self: bool = True) -> np.ndarray:
        nbrs = np.flatnonzero(self.adjacency[k])
        if not include_self:
            nbrs = nbrs[nbrs != k]
        return nbrs

    def edges(self) -> list[tuple[int, int]]:
        iu, ju = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(iu.tolist(), ju.tolist()))

    def permuted(self, perm) -> "NetworkTopology":
        """Relabel nodes so that old node ``perm[j]`` becomes node ``j``."""
        perm = np.asarray(perm)
        return NetworkTopology(self.adjacency[np.ix_(perm, perm)])

    @classmethod
    def from_edges(cls, n_nodes: int, edges) -> "NetworkTopology":
        adj = np.eye(n_nodes, dtype=bool)
        for u, v in edges:
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise TopologyError(f"edge ({u}, {v}) out of range for {n_nodes} nodes")
            adj[u, v] = adj[v, u] = True
        return cls(adj)

    @classmethod
    def from_edge_list_file(cls, path, n_nodes: int | None = None) -> "NetworkTopology":
        """Read ``u v`` pairs (0-indexed), one per line. ``#`` starts a comment."""
        edges = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise TopologyError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            try:
                edges.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise TopologyError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
        if n_nodes is None:
            n_nodes = 1 + max((max(e) for e in edges), default=0)
        return cls.from_edges(n_nodes, edges)

    def to_edge_list(self) -> str:
        return "".join(f"{u} {v}\n" for u, v in self.edges())


def complete_graph(n: int) -> NetworkTopology:
    return NetworkTopology(np.ones((n, n), dtype=bool))


def path_graph(n: int) -> NetworkTopology:
    return NetworkTopology.from_edges(n, [(k, k + 1) for k in range(n - 1)])


def star_graph(n_leaves: int) -> NetworkTopology:
    return NetworkTopology.from_edges(n_leaves + 1, [(0, k) for k in range(1, n_leaves + 1)])


def random_geometric_graph(n: int, radius: float, rng, max_tries: int = 10_000) -> NetworkTopology:
    """Nodes uniform in the unit square, linked when closer than ``radius``.

    Resampled until connected.
    """
    for _ in range(max_tries):
        pos = rng.random((n, 2))
        dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
        adj = dist <= radius
        if connected_components(adj, directed=False)[0] == 1:
            return NetworkTopology(adj)
    raise TopologyError(f"no connected geometric graph with n={n}, radius={radius} after {max_tries} draws")


def random_erdos_renyi_graph(n: int, p: float, rng, max_tries: int = 10_000) -> NetworkTopology:
    for _ in range(max_tries):
        upper = np.triu(rng.random((n, n)) < p, k=1)
        adj = upper | upper.T
        np.fill_diagonal(adj, True)
        if connected_components(adj, directed=False)[0] == 1:
            return NetworkTopology(adj)
    raise TopologyError(f"no connected G(n={n}, p={p}) graph after {max_tries} draws")


@dataclass(frozen=True, eq=False)
class CombinationMatrix:
    """Nonnegative weights; entry ``(l, k)`` is the weight node ``k`` gives to ``l``."""

    weights: np.ndarray
    stochasticity: str = "doubly"

    def __post_init__(self):
        if self.stochasticity not in STOCHASTICITY:
            raise ValueError(f"stochasticity must be one of {STOCHASTICITY}")
        w = np.array(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]


@dataclass
class Diagnostics:
    max_row_deviation: float
    max_col_deviation: float
    min_entry: float
    support_violations: list = field(default_factory=list)
    stochasticity: str = "doubly"
    tol: float = SUM_TOL

    @property
    def row_ok(self) -> bool:
        return self.max_row_deviation <= self.tol

    @property
    def col_ok(self) -> bool:
        return self.max_col_deviation <= self.tol

    @property
    def ok(self) -> bool:
        if self.min_entry < 0 or self.support_violations:
            return False
        if self.stochasticity == "left":
            return self.col_ok
        if self.stochasticity == "right":
            return self.row_ok
        return self.row_ok and self.col_ok


def validate(matrix, topology: NetworkTopology | None = None, stochasticity: str | None = None,
             tol: float = SUM_TOL) -> Diagnostics:
    """Report stochasticity and support of a combination matrix; never raises."""
    if isinstance(matrix, CombinationMatrix):
        stochasticity = stochasticity or matrix.stochasticity
    w = np.asarray(matrix, dtype=float)
    violations = []
    if topology is not None:
        bad = (w != 0) & ~topology.adjacency
        violations = [(int(l), int(k)) for l, k in zip(*np.nonzero(bad))]
    return Diagnostics(
        max_row_deviation=float(np.max(np.abs(w.sum(axis=1) - 1.0))),
        max_col_deviation=float(np.max(np.abs(w.sum(axis=0) - 1.0))),
        min_entry=float(w.min()),
        support_violations=violations,
        stochasticity=stochasticity or "doubly",
        tol=tol,
    )


def metropolis_weights(topology: NetworkTopology) -> CombinationMatrix:
    """Metropolis rule: ``1 / max(deg k, deg l)`` on edges, remainder on the diagonal.

    Degrees exclude self-loops. The result is symmetric and doubly stochastic.
    """
    adj = topology.adjacency
    if connected_components(adj, directed=False)[0] != 1:
        raise TopologyError("Metropolis weights need a connected graph")
    deg = topology.degree
    off = adj & ~np.eye(topology.n_nodes, dtype=bool)
    w = np.zeros(adj.shape)
    rows, cols = np.nonzero(off)
    w[rows, cols] = 1.0 / np.maximum(deg[rows], deg[cols])
    # The self weight is exactly zero for some nodes; keep rounding from making it negative.
    np.fill_diagonal(w, np.maximum(1.0 - w.sum(axis=0), 0.0))
    return CombinationMatrix(w, "doubly")


def uniform_weights(topology: NetworkTopology) -> CombinationMatrix:
    """``weight(l, k) = 1/|N_k|``: columns sum to one (left-stochastic)."""
    adj = topology.adjacency.astype(float)
    w = adj / adj.sum(axis=0, keepdims=True)
    diag = validate(w, topology, "doubly")
    kind = "doubly" if diag.row_ok else "left"
    return CombinationMatrix(w, kind)


def identity_weights(n: int) -> CombinationMatrix:
    return CombinationMatrix(np.eye(n), "doubly")
