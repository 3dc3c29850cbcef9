"""Over-smoothing and generalization diagnostics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import SparseGraph, build_propagator, degree_eigenvectors
from .linalg import DimensionError


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """Orthonormal basis of the degree subspace: one sqrt-degree column per component."""

    e: np.ndarray

    @classmethod
    def from_graph(cls, g: SparseGraph) -> "SubspaceBasis":
        return cls(degree_eigenvectors(g))

    @property
    def num_components(self) -> int:
        return self.e.shape[1]


def subspace_distance(h: np.ndarray, basis: SubspaceBasis | np.ndarray) -> float:
    """Frobenius distance from ``h`` to the degree subspace."""
    e = basis.e if isinstance(basis, SubspaceBasis) else np.asarray(basis)
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != e.shape[0]:
        raise DimensionError(f"embedding has {h.shape[0]} rows, basis has {e.shape[0]}")
    return float(np.linalg.norm(h - e @ (e.T @ h)))


def dirichlet_energy(h: np.ndarray, p: sp.spmatrix, g: SparseGraph) -> float:
    """``0.5 * sum_ij P_ij ||h_i/sqrt(deg i) - h_j/sqrt(deg j)||^2``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != g.n or p.shape != (g.n, g.n):
        raise DimensionError("embedding, propagator and graph sizes disagree")
    a = h / np.sqrt(g.degrees.astype(np.float64))[:, None]
    c = sp.coo_matrix(p)
    diff = a[c.row] - a[c.col]
    return 0.5 * float(np.sum(c.data * np.sum(diff * diff, axis=1)))


def dirichlet_energy_unnormalized(h: np.ndarray, g: SparseGraph) -> float:
    """``0.5 * sum over ordered edge pairs of ||h_i - h_j||^2`` (each undirected edge once)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] != g.n:
        raise DimensionError("embedding and graph sizes disagree")
    diff = h[g.edges[:, 0]] - h[g.edges[:, 1]]
    return float(np.sum(diff * diff))


def laplacian_min_nonzero_eig(g: SparseGraph, tol: float = 1e-9) -> float:
    """Smallest nonzero eigenvalue of ``D - A`` (dense; meant for small graphs)."""
    a = g.adjacency.toarray()
    lap = np.diag(a.sum(axis=1)) - a
    w = np.linalg.eigvalsh(lap)
    nz = w[w > tol]
    return float(nz.min()) if nz.size else 0.0


def _pair_sums(h: np.ndarray, labels: np.ndarray):
    # sum_{i<j} ||h_i - h_j||^2 = n_S * sum ||h_i||^2 - ||sum h_i||^2 within a set S
    sq = np.sum(h * h, axis=1)
    out = {}
    classes = np.unique(labels)
    tot_sq, tot_sum = sq.sum(), h.sum(axis=0)
    for c in classes:
        m = labels == c
        k = int(m.sum())
        s = h[m].sum(axis=0)
        out[c] = (k, k * sq[m].sum() - float(s @ s), sq[m].sum(), s)
    return classes, out, tot_sq, tot_sum


def intra_inter(h: np.ndarray, labels) -> tuple[float, float]:
    """Average squared pairwise distance within and across classes, divided by ``||H||_F``.

    Sums run over unordered pairs ``i < j``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    labels = np.asarray(labels)
    if labels.shape[0] != h.shape[0]:
        raise DimensionError("one label per embedding row is required")
    classes, stats, _, _ = _pair_sums(h, labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    for c in classes:
        if stats[c][0] < 2:
            raise ValueError(f"class {c!r} has fewer than two members")
    norm = float(np.linalg.norm(h))
    intra_sum = sum(stats[c][1] for c in classes)
    intra_pairs = sum(stats[c][0] * (stats[c][0] - 1) // 2 for c in classes)
    inter_sum = 0.0
    inter_pairs = 0
    for ai, a in enumerate(classes):
        ka, _, sqa, sa = stats[a]
        for b in classes[ai + 1:]:
            kb, _, sqb, sb = stats[b]
            inter_sum += kb * sqa + ka * sqb - 2.0 * float(sa @ sb)
            inter_pairs += ka * kb
    if norm == 0.0:
        return 0.0, 0.0
    return max(intra_sum, 0.0) / (norm * intra_pairs), max(inter_sum, 0.0) / (norm * inter_pairs)


def contraction_rate(arch: str, lam: float, s: float = 1.0, alpha: float = 0.9, beta: float = 0.5,
                     d_m_h0: float = 0.0, d_m_bias: float = 0.0) -> tuple[float, float]:
    """Per-layer ``(gamma, eps)`` with ``d_M(H_l) - eps <= gamma (d_M(H_{l-1}) - eps)``.

    ``arch`` may also be ``"GCN-bias"``; ``d_m_bias`` is then the distance of the
    bias term to the degree subspace.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if s < 0:
        raise ValueError("s must be non-negative")
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValueError("alpha and beta must lie in [0, 1]")
    key = arch.lower()
    if key == "gcn":
        return lam * s, 0.0
    if key == "gcn-bias":
        return lam * s, float(d_m_bias)
    if key == "sgc":
        return lam, 0.0
    if key == "resgcn":
        return 1.0 + lam * s, 0.0
    if key in ("appnp", "gcnii"):
        gamma = alpha * lam if key == "appnp" else (1.0 - (1.0 - beta) * (1.0 - s)) * alpha * lam
        num = (1.0 - alpha) * d_m_h0
        if gamma == 1.0:
            if num != 0.0:
                raise ZeroDivisionError("gamma = 1 leaves the offset term undefined")
            return gamma, 0.0
        return gamma, num / (1.0 - gamma)
    raise ValueError(f"no contraction rate for architecture {arch!r}")


def generalization_gap(history) -> np.ndarray:
    """Validation loss minus training loss, per epoch."""
    return np.asarray(history.val_loss) - np.asarray(history.train_loss)


def accuracy_gap(history) -> np.ndarray:
    """Training accuracy minus validation accuracy, per epoch."""
    return np.asarray(history.train_acc) - np.asarray(history.val_acc)


@dataclass(frozen=True, eq=False)
class LayerMetrics:
    d_m: np.ndarray
    dirichlet: np.ndarray
    intra: np.ndarray
    inter: np.ndarray

    def __len__(self):
        return len(self.d_m)

    def rows(self) -> list[tuple[int, float, float, float, float]]:
        return [(l, float(self.d_m[l]), float(self.dirichlet[l]), float(self.intra[l]), float(self.inter[l]))
                for l in range(len(self))]

    def to_csv(self, run: dict | None = None, header: bool = True) -> str:
        """CSV with columns ``<run keys>,layer,d_m,dirichlet,intra,inter``."""
        run = run or {}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(list(run) + ["layer", "d_m", "dirichlet", "intra", "inter"])
        for r in self.rows():
            w.writerow(list(run.values()) + [r[0]] + [f"{v:.17g}" for v in r[1:]])
        return buf.getvalue()


def layer_metrics(hs, g: SparseGraph, labels, p: sp.spmatrix | None = None) -> LayerMetrics:
    """Metrics for every matrix in ``hs`` (for example ``trace.h``)."""
    p = build_propagator(g) if p is None else p
    basis = SubspaceBasis.from_graph(g)
    dm, de, ia, ie = [], [], [], []
    for h in hs:
        dm.append(subspace_distance(h, basis))
        de.append(dirichlet_energy(h, p, g))
        a, b = intra_inter(h, labels)
        ia.append(a)
        ie.append(b)
    return LayerMetrics(np.array(dm), np.array(de), np.array(ia), np.array(ie))
