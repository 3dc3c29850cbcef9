"""Self-looped undirected graphs and the normalized propagator.

Self-loops are structural: every node always carries one, it is never
listed in ``edges`` and DropEdge never removes it. Degrees therefore count
the self-loop, so ``deg(i) >= 1`` and ``P = D^{-1/2} A D^{-1/2}`` is always
defined.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .linalg import ConvergenceError, make_rng

__all__ = [
    "SparseGraph",
    "SpectralSummary",
    "build_propagator",
    "spectral_summary",
    "max_row_sum",
    "drop_edges",
    "degree_eigenvectors",
    "read_graph",
    "write_graph",
]


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Undirected graph on ``n`` nodes with implicit self-loops.

    ``edges`` is an ``(E, 2)`` int array of sorted, unique pairs ``i < j``.
    Use :meth:`from_edges` to build one from arbitrary pair lists.
    """

    n: int
    edges: np.ndarray = field(repr=False)

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        if e.size:
            if e.min() < 0 or e.max() >= self.n:
                raise ValueError("edge endpoint out of range")
            if np.any(e[:, 0] >= e[:, 1]):
                raise ValueError("edges must be stored as i < j; use SparseGraph.from_edges")
            keys = e[:, 0] * self.n + e[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise ValueError("edges must be sorted and unique; use SparseGraph.from_edges")
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)

    @classmethod
    def from_edges(cls, n: int, pairs) -> "SparseGraph":
        """Normalize any iterable of ``(i, j)`` pairs: drops self pairs and duplicates."""
        e = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs,
                       dtype=np.int64).reshape(-1, 2)
        e = e[e[:, 0] != e[:, 1]]
        e = np.sort(e, axis=1)
        if e.size:
            keys = np.unique(e[:, 0] * n + e[:, 1])
            e = np.stack([keys // n, keys % n], axis=1)
        return cls(n, e)

    @property
    def num_edges(self) -> int:
        """Number of non-self-loop undirected edges."""
        return int(self.edges.shape[0])

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.ones(self.n, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        deg.setflags(write=False)
        return deg

    @property
    def max_degree(self) -> int:
        return int(self.degrees.max())

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency including the diagonal."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        diag = np.arange(self.n)
        rows = np.concatenate([i, j, diag])
        cols = np.concatenate([j, i, diag])
        a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n, self.n))
        a.sort_indices()
        return a

    def components(self) -> tuple[int, np.ndarray]:
        """Number of connected components and a label per node."""
        k, labels = connected_components(self.adjacency, directed=False)
        return int(k), labels


def build_propagator(g: SparseGraph) -> sp.csr_matrix:
    """``P = D^{-1/2} A D^{-1/2}`` as a CSR matrix."""
    a = g.adjacency.tocoo()
    inv_sqrt = 1.0 / np.sqrt(g.degrees.astype(np.float64))
    vals = inv_sqrt[a.row] * inv_sqrt[a.col]
    p = sp.csr_matrix((vals, (a.row, a.col)), shape=a.shape)
    p.sort_indices()
    return p


def degree_eigenvectors(g: SparseGraph) -> np.ndarray:
    """Orthonormal ``n x M`` basis; column ``c`` is sqrt(deg) restricted to component ``c``."""
    k, labels = g.components()
    sq = np.sqrt(g.degrees.astype(np.float64))
    e = np.zeros((g.n, k))
    e[np.arange(g.n), labels] = sq
    e /= np.linalg.norm(e, axis=0, keepdims=True)
    return e


@dataclass(frozen=True)
class SpectralSummary:
    lambda_second: float
    num_components: int
    max_degree: int
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True


def spectral_summary(g: SparseGraph, tol: float = 1e-10, max_iter: int = 10_000,
                     seed: int = 0, strict: bool = False) -> SpectralSummary:
    """Largest |eigenvalue| of P off the degree eigenspace.

    Power iteration on ``P^2`` with explicit deflation against the
    per-component sqrt-degree vectors, so eigenvalue pairs ``+-lambda`` do
    not stall the iteration. With ``strict=True`` a non-converged run raises
    :class:`~gcnlab.linalg.ConvergenceError`; otherwise it is reported via
    the ``converged`` flag.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = build_propagator(g)
    e = degree_eigenvectors(g)
    m = e.shape[1]
    base = dict(num_components=m, max_degree=g.max_degree)
    if m == g.n:
        return SpectralSummary(0.0, **base)

    def deflate(v):
        return v - e @ (e.T @ v)

    rng = make_rng(seed)
    x = deflate(rng.standard_normal(g.n))
    x /= np.linalg.norm(x)
    mu = 0.0
    residual = np.inf
    for it in range(1, max_iter + 1):
        y = deflate(p @ (p @ x))
        mu = float(x @ y)
        residual = float(np.linalg.norm(y - mu * x))
        ny = np.linalg.norm(y)
        if ny == 0.0 or residual <= tol:
            return SpectralSummary(float(np.sqrt(max(mu, 0.0))), **base,
                                   iterations=it, residual=residual, converged=True)
        x = y / ny
    if strict:
        raise ConvergenceError(f"lambda_second not converged after {max_iter} iterations "
                               f"(residual {residual:.3g})")
    return SpectralSummary(float(np.sqrt(max(mu, 0.0))), **base,
                           iterations=max_iter, residual=residual, converged=False)


def max_row_sum(p: sp.csr_matrix) -> float:
    """max_i sum_j P_ij; never exceeds sqrt(max degree)."""
    return float(np.max(np.asarray(p.sum(axis=1)).ravel()))


def drop_edges(g: SparseGraph, rate: float, seed) -> SparseGraph:
    """Remove each non-self-loop edge independently with probability ``rate``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    keep = rng.random(g.num_edges) >= rate
    return SparseGraph(g.n, g.edges[keep])


def write_graph(g: SparseGraph, path: str | Path) -> None:
    """Plain text: node count on line 1, then one ``i j`` edge per line."""
    with open(path, "w") as fh:
        fh.write(f"{g.n}\n")
        for i, j in g.edges:
            fh.write(f"{i} {j}\n")


def read_graph(path: str | Path) -> SparseGraph:
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"{path}: empty graph file")
    n = int(lines[0])
    pairs = [tuple(int(t) for t in ln.split()) for ln in lines[1:]]
    if any(len(pr) != 2 for pr in pairs):
        raise ValueError(f"{path}: every edge line needs exactly two node ids")
    return SparseGraph.from_edges(n, pairs)
