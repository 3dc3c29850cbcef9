"""Two-class contextual stochastic block model and transductive splits.

Edges: intra-class probability ``(d + lam*sqrt(d))/n``, inter-class
``(d - lam*sqrt(d))/n`` where ``d`` is the target average degree.
Features: ``x_i = sqrt(mu/n) * y_i * u + z_i / sqrt(p)`` with ``y_i = +-1``,
``u`` a unit Gaussian direction and ``z_i`` standard normal.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import SparseGraph, write_graph
from .linalg import dump_csv, make_rng, split_rng

DEFAULT_THRESHOLD_MARGIN = 1.0


class CsbmParameterError(ValueError):
    pass


@dataclass(frozen=True)
class CsbmParams:
    n: int = 1000
    avg_degree: float = 5.0
    feature_dim: int = 1000
    mu: float = 1.0
    lambda_g: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n < 2 or self.n % 2:
            raise CsbmParameterError("n must be even and at least 2")
        if self.avg_degree < 1:
            raise CsbmParameterError("avg_degree must be >= 1")
        if self.feature_dim < 1:
            raise CsbmParameterError("feature_dim must be >= 1")
        if self.mu < 0:
            raise CsbmParameterError("mu must be non-negative")
        p_in, p_out = self.edge_probabilities()
        for name, pr in (("intra", p_in), ("inter", p_out)):
            if not 0.0 <= pr <= 1.0:
                raise CsbmParameterError(f"{name}-class edge probability {pr:.4g} outside [0, 1]")

    def edge_probabilities(self) -> tuple[float, float]:
        shift = self.lambda_g * math.sqrt(self.avg_degree)
        return (self.avg_degree + shift) / self.n, (self.avg_degree - shift) / self.n


@dataclass(frozen=True, eq=False)
class LabeledGraph:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    params: CsbmParams | None = None


def generate(params: CsbmParams) -> LabeledGraph:
    params.validate()
    n, p = params.n, params.feature_dim
    label_rng, edge_rng, feat_rng = split_rng(make_rng(params.seed), 3)

    labels = np.repeat([0, 1], n // 2)
    label_rng.shuffle(labels)

    p_in, p_out = params.edge_probabilities()
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    hit = edge_rng.random(iu.size) < prob
    graph = SparseGraph(n, np.stack([iu[hit], ju[hit]], axis=1))

    u = feat_rng.standard_normal(p)
    u /= np.linalg.norm(u)
    signs = 2.0 * labels - 1.0
    noise = feat_rng.standard_normal((n, p)) / math.sqrt(p)
    features = math.sqrt(params.mu / n) * signs[:, None] * u[None, :] + noise
    return LabeledGraph(graph, features, labels.astype(np.int64), params)


@dataclass(frozen=True)
class TransductiveSplit:
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def m(self) -> int:
        return int(self.train_idx.size)

    def u(self, which: str = "test") -> int:
        """Unlabeled-set size used by the bounds: ``"test"`` or ``"val+test"``."""
        if which == "test":
            return int(self.test_idx.size)
        if which == "val+test":
            return int(self.val_idx.size + self.test_idx.size)
        raise ValueError(f"unknown unlabeled set {which!r}")


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:short]] += 1
    return base


def split(n: int, fractions=(0.75, 0.15, 0.10), seed: int = 0,
          labels: np.ndarray | None = None) -> TransductiveSplit:
    """Random train/val/test partition, stratified by class when labels are given.

    Split sizes are ``round(f * n)`` for train and val; test takes the rest.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n_train = int(round(fr[0] * n))
    n_val = min(int(round(fr[1] * n)), n - n_train)
    totals = np.array([n_train, n_val, n - n_train - n_val])

    rng = make_rng(seed)
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    sizes = np.array([len(mb) for mb in members])

    # quota[c, s]: nodes of class c placed in split s; rows sum to class sizes
    quota = np.zeros((len(classes), 3), dtype=np.int64)
    remaining = sizes.copy()
    for s in range(2):
        q = _largest_remainder(totals[s], sizes.astype(np.float64))
        q = np.minimum(q, remaining)
        deficit = totals[s] - q.sum()
        for c in np.argsort(-(remaining - q), kind="stable"):
            if deficit <= 0:
                break
            add = min(deficit, remaining[c] - q[c])
            q[c] += add
            deficit -= add
        quota[:, s] = q
        remaining -= q
    quota[:, 2] = remaining

    parts = [[], [], []]
    for c, mb in enumerate(members):
        start = 0
        for s in range(3):
            parts[s].append(mb[start:start + quota[c, s]])
            start += quota[c, s]
    idx = [np.sort(np.concatenate(pt)).astype(np.int64) for pt in parts]
    return TransductiveSplit(*idx)


def equal_information_params(seed: int, n: int = 1000, feature_dim: int = 1000,
                             avg_degree: float = 5.0,
                             margin: float = DEFAULT_THRESHOLD_MARGIN,
                             angle: float | None = None,
                             angle_range: tuple[float, float] = (math.pi / 8, 3 * math.pi / 8),
                             ) -> CsbmParams:
    """Pick ``(mu, lambda_g)`` on ``lambda_g**2 + mu**2 / (p/n) = 1 + margin``.

    The point is parameterized by an angle ``theta``:
    ``lambda_g = sqrt(c) cos(theta)``, ``mu = sqrt(c * p/n) sin(theta)``.
    ``theta = 0`` is the graph-only endpoint and ``pi/2`` the feature-only
    one. When ``angle`` is None it is drawn uniformly from ``angle_range``.
    """
    c = 1.0 + margin
    if angle is None:
        lo, hi = angle_range
        angle = float(make_rng(seed).uniform(lo, hi))
    ratio = feature_dim / n
    lam = math.sqrt(c) * math.cos(angle)
    mu = math.sqrt(c * ratio) * math.sin(angle)
    params = CsbmParams(n=n, avg_degree=avg_degree, feature_dim=feature_dim,
                        mu=mu, lambda_g=lam, seed=seed)
    params.validate()
    return params


def curve_value(params: CsbmParams) -> float:
    """Left-hand side ``lambda_g**2 + mu**2 / (p/n)`` of the information curve."""
    return params.lambda_g ** 2 + params.mu ** 2 / (params.feature_dim / params.n)


def save(lg: LabeledGraph, directory: str | Path, stem: str = "csbm") -> dict[str, Path]:
    """Write graph, features CSV, labels CSV and a JSON parameter sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "graph": d / f"{stem}.graph",
        "features": d / f"{stem}_features.csv",
        "labels": d / f"{stem}_labels.csv",
        "params": d / f"{stem}_params.json",
    }
    write_graph(lg.graph, paths["graph"])
    dump_csv(lg.features, paths["features"])
    np.savetxt(paths["labels"], lg.labels, fmt="%d")
    meta = asdict(lg.params) if lg.params is not None else {}
    if lg.params is not None:
        meta["curve_value"] = curve_value(lg.params)
    paths["params"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths
