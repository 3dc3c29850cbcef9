"""Dense kernels, activations, norms and seeded randomness.

Dense matrices are plain ``numpy.ndarray`` objects of dtype float64. The
functions here add the dimension checks and conventions (ReLU subgradient,
power-iteration spectral norm) that the rest of the package relies on.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConvergenceError(RuntimeError):
    """An iterative method hit its iteration cap before reaching tolerance."""


def as_matrix(a) -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (vectors become columns)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def spmm(p: sp.csr_matrix, h: np.ndarray) -> np.ndarray:
    """Sparse propagator times dense matrix."""
    if p.shape[1] != h.shape[0]:
        raise DimensionError(f"propagator is {p.shape}, dense operand has {h.shape[0]} rows")
    return np.asarray(p @ h)


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def relu_mask(z: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is taken as 0
    return (z > 0).astype(np.float64)


def sigmoid(x):
    """Numerically stable logistic function; works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class PowerResult:
    value: float
    iterations: int
    residual: float
    converged: bool


def spectral_norm_info(m: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000,
                       seed: int = 0) -> PowerResult:
    """Largest singular value of ``m`` by power iteration on ``m.T @ m``.

    The returned ``residual`` is the relative change of the Rayleigh
    estimate over the last iteration.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"expected a non-empty matrix, got shape {m.shape}")
    if not np.any(m):
        raise ValueError("spectral norm of the zero matrix is undefined for power iteration")
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(gram.shape[0])
    x /= np.linalg.norm(x)
    est = 0.0
    residual = np.inf
    for it in range(1, max_iter + 1):
        y = gram @ x
        new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # started in the null space; restart from a fresh direction
            x = rng.standard_normal(gram.shape[0])
            x /= np.linalg.norm(x)
            continue
        x = y / ny
        residual = abs(new - est) / max(abs(new), 1e-300)
        est = new
        if residual <= tol:
            return PowerResult(float(np.sqrt(max(est, 0.0))), it, residual, True)
    return PowerResult(float(np.sqrt(max(est, 0.0))), max_iter, residual, False)


def spectral_norm(m: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """Largest singular value; raises :class:`ConvergenceError` if not converged."""
    res = spectral_norm_info(m, tol=tol, max_iter=max_iter)
    if not res.converged:
        raise ConvergenceError(
            f"spectral norm did not converge in {max_iter} iterations (residual {res.residual:.3g})")
    return res.value


def frobenius(m: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def row_norm_max(m: np.ndarray) -> float:
    """max_i ||m[i, :]||_2, the feature-norm bound B_x of a matrix."""
    if m.size == 0:
        return 0.0
    return float(np.sqrt(np.max(np.sum(np.square(m), axis=1))))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams derived from ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def gaussian_matrix(rows: int, cols: int, std: float, rng: np.random.Generator) -> np.ndarray:
    if std <= 0:
        raise ValueError("std must be positive")
    return rng.standard_normal((rows, cols)) * std


def dump_csv(m: np.ndarray, path: str | Path) -> None:
    """Write a matrix as CSV with 17 significant digits (round-trips exactly)."""
    m = as_matrix(m)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in m:
            w.writerow([f"{v:.17g}" for v in row])


def load_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
