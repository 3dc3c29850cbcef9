"""GCN-family forward passes, hand-written reverse mode and full-batch training.

Conventions shared by all architectures (``L`` = depth):

* GCN      ``H_l = relu(P H_{l-1} W_l [+ b_l])``, ``H_0 = X``
* ResGCN   ``H_l = relu(P H_{l-1} W_l) + H_{l-1}``, ``H_0 = X W_0``
* APPNP    ``H_l = a P H_{l-1} + (1-a) H_0``, ``H_0 = X W``
* GCNII    ``H_l = relu((a P H_{l-1} + (1-a) H_0)(b_l W_l + (1-b_l) I))``, ``H_0 = X W_0``
* DGCN     ``Z = sum_l alpha_l P^l X (beta_l W_l + (1-beta_l) I)``,
           ``alpha = softmax(logits)``, ``beta = sigmoid(logits)``
* SGC      ``H_l = P H_{l-1}``, ``H_0 = X W``

The classifier head is ``s = H_L v``. The margin loss reads ``f = sigmoid(s)``;
the squared loss uses ``s`` directly.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import SparseGraph, build_propagator, drop_edges
from .linalg import DimensionError, make_rng, relu, relu_mask, sigmoid, spectral_norm_info

ARCHS = ("GCN", "ResGCN", "APPNP", "GCNII", "DGCN", "SGC")
_PAIRNORM_ARCHS = ("GCN", "ResGCN", "GCNII")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class StaleTraceError(DimensionError):
    """A forward trace does not belong to the parameters/inputs it is used with."""


class DegenerateInputError(ValueError):
    pass


def canonical_arch(name: str) -> str:
    for a in ARCHS:
        if a.lower() == str(name).lower():
            return a
    raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(ARCHS)}")


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    depth: int
    input_dim: int
    hidden_dim: int = 16
    out_dim: int = 1
    alpha: float = 0.9
    beta: float = 0.5
    beta_schedule: str = "constant"
    use_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "arch", canonical_arch(self.arch))
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.input_dim < 1 or self.hidden_dim < 1 or self.out_dim < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.beta_schedule not in ("constant", "log"):
            raise ValueError("beta_schedule must be 'constant' or 'log'")
        if self.use_bias and self.arch != "GCN":
            raise ValueError("use_bias is only defined for GCN")

    def betas(self) -> np.ndarray:
        """Per-layer GCNII beta: constant, or ``log(0.5/l + 1)``."""
        layers = np.arange(1, self.depth + 1, dtype=np.float64)
        if self.beta_schedule == "log":
            return np.log(0.5 / layers + 1.0)
        return np.full(self.depth, self.beta)

    @property
    def repr_dim(self) -> int:
        return self.input_dim if self.arch == "DGCN" else self.hidden_dim

    def weight_shapes(self) -> list[tuple[int, int]]:
        d0, h, L = self.input_dim, self.hidden_dim, self.depth
        if self.arch == "GCN":
            return [(d0, h)] + [(h, h)] * (L - 1)
        if self.arch in ("ResGCN", "GCNII"):
            return [(d0, h)] + [(h, h)] * L
        if self.arch in ("APPNP", "SGC"):
            return [(d0, h)]
        return [(d0, d0)] * L  # DGCN


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Learnable state. Gradients use the same container."""

    weights: tuple[np.ndarray, ...]
    v: np.ndarray
    biases: tuple[np.ndarray, ...] = ()
    alpha_logits: np.ndarray | None = None
    beta_logits: np.ndarray | None = None

    def named(self) -> dict[str, np.ndarray]:
        out = {f"W{i}": w for i, w in enumerate(self.weights)}
        out.update({f"b{i}": b for i, b in enumerate(self.biases)})
        out["v"] = self.v
        if self.alpha_logits is not None:
            out["alpha_logits"] = self.alpha_logits
        if self.beta_logits is not None:
            out["beta_logits"] = self.beta_logits
        return out

    def with_named(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        cur = self.named()
        cur.update(arrays)
        return ModelParams(
            weights=tuple(cur[f"W{i}"] for i in range(len(self.weights))),
            v=cur["v"],
            biases=tuple(cur[f"b{i}"] for i in range(len(self.biases))),
            alpha_logits=cur.get("alpha_logits"),
            beta_logits=cur.get("beta_logits"),
        )

    def copy(self) -> "ModelParams":
        return self.with_named({k: a.copy() for k, a in self.named().items()})

    @property
    def mixing_alpha(self) -> np.ndarray | None:
        if self.alpha_logits is None:
            return None
        return _softmax(self.alpha_logits)

    @property
    def mixing_beta(self) -> np.ndarray | None:
        if self.beta_logits is None:
            return None
        return sigmoid(self.beta_logits)


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max())
    return e / e.sum()


def init_params(spec: ModelSpec, seed=0, v_std: float | None = None, gain: float = 1.0) -> ModelParams:
    """Gaussian weights with std ``gain * sqrt(1/fan_in)``; zero biases and mixing logits."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    weights = tuple(rng.standard_normal(s) * (gain * math.sqrt(1.0 / s[0])) for s in spec.weight_shapes())
    r = spec.repr_dim
    v = rng.standard_normal((r, spec.out_dim)) * (v_std if v_std is not None else math.sqrt(1.0 / r))
    biases = tuple(np.zeros(spec.hidden_dim) for _ in range(spec.depth)) if spec.use_bias else ()
    if spec.arch == "DGCN":
        return ModelParams(weights, v, biases, np.zeros(spec.depth), np.zeros(spec.depth))
    return ModelParams(weights, v, biases)


# --------------------------------------------------------------------- PairNorm

def pairnorm(h: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Center rows and rescale so that the mean squared row norm equals ``scale**2``."""
    return _pairnorm_forward(h, scale)[0]


def _pairnorm_forward(h, scale):
    c = h - h.mean(axis=0, keepdims=True)
    sigma = math.sqrt(float(np.sum(c * c)) / h.shape[0])
    if sigma <= 1e-300:
        raise DegenerateInputError("PairNorm needs at least two distinct rows")
    out = scale * c / sigma
    return out, (c, sigma, scale)


def _pairnorm_backward(g, cache):
    c, sigma, scale = cache
    n = c.shape[0]
    dc = (scale / sigma) * (g - (np.sum(g * c) / (n * sigma * sigma)) * c)
    return dc - dc.mean(axis=0, keepdims=True)


# ---------------------------------------------------------------------- forward

@dataclass(eq=False)
class ForwardTrace:
    """Layer states kept for backprop and metrics.

    ``h[0..L]`` are layer outputs (``h[0]`` is the layer-0 representation),
    ``z[0..L-1]`` pre-activations of layers ``1..L`` and ``output`` the final
    node representation fed to the classifier.
    """

    arch: str
    h: list[np.ndarray]
    z: list[np.ndarray]
    output: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


def _check_inputs(spec: ModelSpec, params: ModelParams, p, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"features have shape {x.shape}, spec expects {spec.input_dim} columns")
    if p.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(f"propagator {p.shape} does not match {x.shape[0]} nodes")
    shapes = spec.weight_shapes()
    if len(params.weights) != len(shapes) or any(w.shape != s for w, s in zip(params.weights, shapes)):
        raise DimensionError("parameter shapes do not match the model spec")
    if params.v.shape != (spec.repr_dim, spec.out_dim):
        raise DimensionError(f"classifier has shape {params.v.shape}, expected {(spec.repr_dim, spec.out_dim)}")


def forward(spec: ModelSpec, params: ModelParams, p: sp.spmatrix, x: np.ndarray,
            pairnorm_scale: float | None = None) -> ForwardTrace:
    _check_inputs(spec, params, p, x)
    if pairnorm_scale is not None and spec.arch not in _PAIRNORM_ARCHS:
        raise ValueError(f"PairNorm is only applied after activations ({', '.join(_PAIRNORM_ARCHS)})")
    arch, L, W = spec.arch, spec.depth, params.weights
    cache: dict = {"n": x.shape[0], "pairnorm": pairnorm_scale, "pn": [], "inputs": []}

    def activate(zl):
        r = relu(zl)
        if pairnorm_scale is None:
            return r
        out, c = _pairnorm_forward(r, pairnorm_scale)
        cache["pn"].append(c)
        return out

    h: list[np.ndarray] = []
    z: list[np.ndarray] = []
    if arch == "GCN":
        h.append(x)
        for l in range(L):
            a = p @ h[-1]
            zl = a @ W[l]
            if spec.use_bias:
                zl = zl + params.biases[l]
            cache["inputs"].append(a)
            z.append(zl)
            h.append(activate(zl))
    elif arch == "ResGCN":
        h.append(x @ W[0])
        for l in range(1, L + 1):
            a = p @ h[-1]
            zl = a @ W[l]
            cache["inputs"].append(a)
            z.append(zl)
            h.append(activate(zl) + h[-1])
    elif arch == "APPNP":
        al = spec.alpha
        h.append(x @ W[0])
        for _ in range(L):
            hl = al * (p @ h[-1]) + (1.0 - al) * h[0]
            z.append(hl)
            h.append(hl)
    elif arch == "GCNII":
        al, betas = spec.alpha, spec.betas()
        eye = np.eye(spec.hidden_dim)
        h.append(x @ W[0])
        for l in range(1, L + 1):
            s = al * (p @ h[-1]) + (1.0 - al) * h[0]
            wbar = betas[l - 1] * W[l] + (1.0 - betas[l - 1]) * eye
            zl = s @ wbar
            cache["inputs"].append(s)
            z.append(zl)
            h.append(activate(zl))
    elif arch == "SGC":
        h.append(x @ W[0])
        for _ in range(L):
            hl = p @ h[-1]
            z.append(hl)
            h.append(hl)
    elif arch == "DGCN":
        alphas, betas = params.mixing_alpha, params.mixing_beta
        if alphas is None or betas is None or alphas.shape != (L,) or betas.shape != (L,):
            raise DimensionError("DGCN needs one alpha and one beta logit per layer")
        q = x
        out = np.zeros_like(x)
        h.append(x)
        for l in range(L):
            q = p @ q
            qw = q @ W[l]
            y = betas[l] * qw + (1.0 - betas[l]) * q
            cache["inputs"].append(q)
            z.append(qw)
            h.append(y)
            out = out + alphas[l] * y
        return ForwardTrace(arch, h, z, out, cache)
    return ForwardTrace(arch, h, z, h[-1], cache)


# ----------------------------------------------------------------------- losses

def predict(v: np.ndarray, h_i: np.ndarray) -> float:
    """``sigmoid(v . h_i)``."""
    return float(sigmoid(float(np.dot(np.ravel(v), np.ravel(h_i)))))


def p_margin(z, y):
    """Probability gap between correct and wrong label; <= 0 means misclassified."""
    return y * (2.0 * z - 1.0) + (1 - y) * (1.0 - 2.0 * z)


def margin_phi(x, gamma: float):
    """Ramp ``min(1, max(0, 1 - x/gamma))``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return np.minimum(1.0, np.maximum(0.0, 1.0 - np.asarray(x, dtype=np.float64) / gamma))


def margin_loss(z, y, gamma: float):
    """Ramp loss of a prediction ``z`` in [0, 1]; zero once ``p(z, y) >= gamma``."""
    out = margin_phi(p_margin(np.asarray(z, dtype=np.float64), np.asarray(y)), gamma)
    return float(out) if np.ndim(out) == 0 else out


def classification_error(z, y):
    return np.asarray(p_margin(z, y)) <= 0


def squared_loss(output: np.ndarray, y: np.ndarray) -> float:
    """``0.5 * ||output - y||_F^2``."""
    d = np.asarray(output, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return 0.5 * float(np.sum(d * d))


def _targets(labels: np.ndarray, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    return y[:, None] if y.ndim == 1 else y.reshape(-1, k)


def head_loss(kind: str, output: np.ndarray, v: np.ndarray, labels: np.ndarray, idx: np.ndarray,
              gamma: float = 1.0, reduction: str = "mean") -> tuple[float, np.ndarray, float]:
    """Loss over nodes ``idx``, its gradient w.r.t. the logits ``s = output @ v`` and accuracy.

    The gradient is a full ``n x k`` array, zero outside ``idx``.
    """
    s = output @ v
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("loss over an empty node set")
    denom = idx.size if reduction == "mean" else 1.0
    grad = np.zeros_like(s)
    if kind == "margin":
        if s.shape[1] != 1:
            raise DimensionError("the margin loss is defined for a single binary output")
        y = np.asarray(labels, dtype=np.float64).reshape(-1)[idx]
        f = sigmoid(s[idx, 0])
        pm = p_margin(f, y)
        loss = float(np.sum(margin_phi(pm, gamma))) / denom
        active = (pm >= 0.0) & (pm < gamma)  # right-hand slope at the p = 0 kink
        dphi = np.where(active, -1.0 / gamma, 0.0)
        grad[idx, 0] = dphi * 2.0 * (2.0 * y - 1.0) * f * (1.0 - f) / denom
        acc = float(np.mean((f > 0.5) == (y > 0.5)))
    elif kind == "squared":
        y = _targets(labels, s.shape[1])[idx]
        diff = s[idx] - y
        loss = 0.5 * float(np.sum(diff * diff)) / denom
        grad[idx] = diff / denom
        acc = float(np.mean((s[idx, 0] > 0.5) == (y[:, 0] > 0.5)))
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return loss, grad, acc


# --------------------------------------------------------------------- backward

def backward(spec: ModelSpec, params: ModelParams, trace: ForwardTrace, p: sp.spmatrix,
             x: np.ndarray, loss_grads_at_output: np.ndarray) -> ModelParams:
    """Exact gradients given ``dLoss/ds`` for the logits ``s = trace.output @ v``."""
    delta = np.asarray(loss_grads_at_output, dtype=np.float64)
    if delta.ndim == 1:
        delta = delta[:, None]
    n = x.shape[0]
    if (trace.arch != spec.arch or trace.cache.get("n") != n or trace.output.shape != (n, spec.repr_dim)
            or len(trace.h) != spec.depth + 1):
        raise StaleTraceError("trace was produced for a different model or input")
    if delta.shape != (n, spec.out_dim):
        raise DimensionError(f"output gradient has shape {delta.shape}, expected {(n, spec.out_dim)}")

    arch, L, W = spec.arch, spec.depth, params.weights
    pt = p.T
    dv = trace.output.T @ delta
    g = delta @ params.v.T
    dW = [None] * len(W)
    db: list[np.ndarray] = []
    pn = trace.cache.get("pn", [])
    inputs = trace.cache.get("inputs", [])
    d_alpha_logits = d_beta_logits = None

    def unactivate(gl, l):
        if pn:
            gl = _pairnorm_backward(gl, pn[l])
        return gl * relu_mask(trace.z[l])

    if arch == "GCN":
        db = [None] * L if spec.use_bias else []
        for l in reversed(range(L)):
            dz = unactivate(g, l)
            dW[l] = inputs[l].T @ dz
            if spec.use_bias:
                db[l] = dz.sum(axis=0)
            if l:
                g = pt @ (dz @ W[l].T)
    elif arch == "ResGCN":
        for l in reversed(range(L)):
            dz = unactivate(g, l)
            dW[l + 1] = inputs[l].T @ dz
            g = g + pt @ (dz @ W[l + 1].T)
        dW[0] = x.T @ g
    elif arch == "APPNP":
        al = spec.alpha
        acc = np.zeros_like(g)
        for _ in range(L):
            acc += (1.0 - al) * g
            g = al * (pt @ g)
        dW[0] = x.T @ (g + acc)
    elif arch == "GCNII":
        al, betas = spec.alpha, spec.betas()
        eye = np.eye(spec.hidden_dim)
        acc = np.zeros_like(g)
        for l in reversed(range(L)):
            dz = unactivate(g, l)
            b = betas[l]
            dW[l + 1] = b * (inputs[l].T @ dz)
            ds = dz @ (b * W[l + 1] + (1.0 - b) * eye).T
            acc += (1.0 - al) * ds
            g = al * (pt @ ds)
        dW[0] = x.T @ (g + acc)
    elif arch == "SGC":
        for _ in range(L):
            g = pt @ g
        dW[0] = x.T @ g
    elif arch == "DGCN":
        alphas, betas = params.mixing_alpha, params.mixing_beta
        d_alpha = np.empty(L)
        d_beta = np.empty(L)
        for l in range(L):
            q = inputs[l]
            dW[l] = alphas[l] * betas[l] * (q.T @ g)
            d_alpha[l] = np.sum(g * trace.h[l + 1])
            d_beta[l] = alphas[l] * np.sum(g * (trace.z[l] - q))
        d_alpha_logits = alphas * (d_alpha - np.dot(alphas, d_alpha))
        d_beta_logits = d_beta * betas * (1.0 - betas)
    return ModelParams(tuple(dW), dv, tuple(db), d_alpha_logits, d_beta_logits)


def gd_step(params: ModelParams, grads: ModelParams, eta: float, eta_mix: float | None = None) -> ModelParams:
    """``theta <- theta - eta * grad``; DGCN mixing logits use ``eta_mix`` (default ``eta``)."""
    eta_mix = eta if eta_mix is None else eta_mix
    g = grads.named()
    new = {}
    for name, a in params.named().items():
        step = eta_mix if name.endswith("_logits") else eta
        new[name] = a - step * g[name]
    return params.with_named(new)


def loss_and_grads(spec: ModelSpec, params: ModelParams, p, x, labels, idx, loss: str = "margin",
                   gamma: float = 1.0, reduction: str = "mean",
                   pairnorm_scale: float | None = None) -> tuple[float, ModelParams]:
    """Convenience: forward, head loss and backward in one call."""
    tr = forward(spec, params, p, x, pairnorm_scale)
    val, delta, _ = head_loss(loss, tr.output, params.v, labels, idx, gamma, reduction)
    return val, backward(spec, params, tr, p, x, delta)


# --------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01
    epochs: int = 500
    loss: str = "margin"
    gamma: float = 1.0
    augment: str = "none"
    dropedge_rate: float = 0.0
    pairnorm_scale: float = 1.0
    seed: int = 0
    eta_mix: float | None = None
    reduction: str = "mean"
    track_sv: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.loss not in ("margin", "squared"):
            raise ValueError("loss must be 'margin' or 'squared'")
        if self.augment not in ("none", "dropedge", "pairnorm"):
            raise ValueError("augment must be none, dropedge or pairnorm")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")


SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class TrainHistory:
    """Per-epoch records; row ``t`` describes the parameters after ``t`` updates."""

    loss: dict[str, np.ndarray]
    accuracy: dict[str, np.ndarray]
    grad_norm: np.ndarray            # (epochs+1, n_params), Frobenius norm per parameter
    grad_names: tuple[str, ...]
    max_sv: np.ndarray
    final_params: ModelParams | None = field(default=None, repr=False)

    @property
    def train_loss(self):
        return self.loss["train"]

    @property
    def val_loss(self):
        return self.loss["val"]

    @property
    def test_loss(self):
        return self.loss["test"]

    @property
    def train_acc(self):
        return self.accuracy["train"]

    @property
    def val_acc(self):
        return self.accuracy["val"]

    @property
    def test_acc(self):
        return self.accuracy["test"]

    @property
    def total_grad_norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.grad_norm ** 2, axis=1))

    def __len__(self):
        return len(self.max_sv)

    def csv_rows(self) -> list[list]:
        rows = []
        gn = self.total_grad_norm
        for t in range(len(self)):
            for s in SPLITS:
                rows.append([t, s, _fmt(self.loss[s][t]), _fmt(self.accuracy[s][t]),
                             _fmt(gn[t]), _fmt(self.max_sv[t])])
        return rows

    def to_csv(self, fh=None, comment: str | None = None) -> str | None:
        """Write ``epoch,split,loss,accuracy,grad_norm,max_sv``; returns text if ``fh`` is None."""
        own = fh is None
        buf = io.StringIO() if own else fh
        if comment:
            buf.write(f"# {comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "accuracy", "grad_norm", "max_sv"])
        w.writerows(self.csv_rows())
        return buf.getvalue() if own else None


def _fmt(v: float) -> str:
    return f"{float(v):.17g}"


def _weight_sv(params: ModelParams) -> float:
    best = 0.0
    for w in params.weights:
        if np.any(w):
            best = max(best, spectral_norm_info(w, tol=1e-9, max_iter=2000).value)
    return best


def train(spec: ModelSpec, params0: ModelParams, graph: SparseGraph, features: np.ndarray,
          labels: np.ndarray, split, config: TrainConfig) -> TrainHistory:
    """Full-batch gradient descent for ``config.epochs`` updates.

    Every epoch evaluates all splits on the full graph. With DropEdge the
    gradient is taken on a freshly thinned graph drawn from the config seed.
    """
    x = np.asarray(features, dtype=np.float64)
    p_full = build_propagator(graph)
    idx = {"train": split.train_idx, "val": split.val_idx, "test": split.test_idx}
    for name, ix in idx.items():
        if len(ix) == 0:
            raise ValueError(f"{name} split is empty")
    pn_scale = config.pairnorm_scale if config.augment == "pairnorm" else None
    rng = make_rng(config.seed)
    T = config.epochs

    losses = {s: np.empty(T + 1) for s in SPLITS}
    accs = {s: np.empty(T + 1) for s in SPLITS}
    names = tuple(params0.named())
    gnorm = np.empty((T + 1, len(names)))
    max_sv = np.empty(T + 1)
    params = params0
    for t in range(T + 1):
        tr = forward(spec, params, p_full, x, pn_scale)
        deltas = {}
        for s in SPLITS:
            losses[s][t], deltas[s], accs[s][t] = head_loss(
                config.loss, tr.output, params.v, labels, idx[s], config.gamma, config.reduction)
        if config.augment == "dropedge" and config.dropedge_rate > 0:
            p_t = build_propagator(drop_edges(graph, config.dropedge_rate, rng))
            tr = forward(spec, params, p_t, x, pn_scale)
            _, delta, _ = head_loss(config.loss, tr.output, params.v, labels, idx["train"],
                                    config.gamma, config.reduction)
        else:
            p_t, delta = p_full, deltas["train"]
        grads = backward(spec, params, tr, p_t, x, delta)
        gn = grads.named()
        gnorm[t] = [math.sqrt(float(np.sum(gn[k] ** 2))) for k in names]
        max_sv[t] = _weight_sv(params) if config.track_sv else float("nan")
        if not (np.isfinite(losses["train"][t]) and np.all(np.isfinite(gnorm[t]))):
            raise DivergenceError(f"{spec.arch} diverged at epoch {t}: loss={losses['train'][t]!r}")
        if t < T:
            params = gd_step(params, grads, config.eta, config.eta_mix)
    return TrainHistory(losses, accs, gnorm, names, max_sv, params)


def early_stop_index(history: TrainHistory) -> int:
    """Epoch with the highest training accuracy, earliest on ties."""
    return int(np.argmax(history.train_acc))


def finite_difference_grads(spec: ModelSpec, params: ModelParams, p, x, labels, idx,
                            loss: str = "margin", gamma: float = 1.0, step: float = 1e-5,
                            reduction: str = "mean", pairnorm_scale: float | None = None) -> ModelParams:
    """Central differences of the training loss, coordinate by coordinate."""

    def f(pr):
        tr = forward(spec, pr, p, x, pairnorm_scale)
        return head_loss(loss, tr.output, pr.v, labels, idx, gamma, reduction)[0]

    out = {}
    for name, a in params.named().items():
        g = np.zeros_like(a)
        for k in np.ndindex(a.shape):
            plus, minus = a.copy(), a.copy()
            plus[k] += step
            minus[k] -= step
            g[k] = (f(params.with_named({name: plus})) - f(params.with_named({name: minus}))) / (2 * step)
        out[name] = g
    return params.with_named(out)
