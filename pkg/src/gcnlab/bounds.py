"""Closed-form stability constants, generalization bounds and convergence conditions.

Constants are evaluated in log space so that deep or high-degree settings
overflow gracefully: any value above ``OVERFLOW`` is returned as ``inf`` with
``overflow=True`` while the log value stays exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

OVERFLOW = 1e300
BOUND_ARCHS = ("GCN", "ResGCN", "APPNP", "GCNII", "DGCN")
_NEG_INF = float("-inf")


@dataclass(frozen=True)
class StabilityInputs:
    d: float
    L: int
    b_x: float = 1.0
    b_w: float = 1.0
    gamma: float = 1.0
    eta: float = 0.01
    t: int = 500
    m: int = 750
    u: int = 100
    alpha: float = 0.9
    beta: float = 0.1
    delta: float = 0.05

    def __post_init__(self):
        for name in ("d", "b_x", "b_w", "gamma", "eta", "m", "u"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.L < 1 or self.t < 1:
            raise ValueError("L and t must be at least 1")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def q(self) -> float:
        return self.m * self.u / (self.m + self.u)


@dataclass(frozen=True)
class StabilityConstants:
    rho_f: float
    g_f: float
    l_f: float
    epsilon: float = float("nan")
    log_rho_f: float = field(default=float("nan"), repr=False)
    log_g_f: float = field(default=float("nan"), repr=False)
    log_l_f: float = field(default=float("nan"), repr=False)
    overflow: bool = False


def _log(x: float) -> float:
    return math.log(x) if x > 0 else _NEG_INF


def _lse(*logs: float) -> float:
    finite = [v for v in logs if v != _NEG_INF]
    if not finite:
        return _NEG_INF
    top = max(finite)
    return top + math.log(sum(math.exp(v - top) for v in finite))


def _exp(logv: float) -> tuple[float, bool]:
    if logv > math.log(OVERFLOW):
        return float("inf"), True
    return math.exp(logv), False


def _log_b_d_alpha(d: float, L: int, alpha: float) -> float:
    la = _log(alpha * math.sqrt(d))
    terms = [_log(1.0 - alpha) + (l - 1) * la if l > 1 else _log(1.0 - alpha) for l in range(1, L + 1)]
    terms.append(L * la)
    return _lse(*terms)


def helper_constants(inp: StabilityInputs) -> tuple[float, float, float]:
    """``(B_d^alpha, B_w^beta, B_{l,d}^{alpha,beta})``."""
    a, b, d, L = inp.alpha, inp.beta, inp.d, inp.L
    b_d_alpha = _exp(_log_b_d_alpha(d, L, a))[0]
    b_w_beta = b * inp.b_w + (1.0 - b)
    b_ldb = max(b * ((1.0 - a) * L + a * math.sqrt(d)), (1.0 - a) * L * b_w_beta + 1.0)
    return b_d_alpha, b_w_beta, b_ldb


def log_constants(arch: str, inp: StabilityInputs) -> tuple[float, float, float]:
    """Natural logs of ``(rho_f, G_f, L_f)``."""
    key = arch.lower()
    L, d, bw, bx = inp.L, inp.d, inp.b_w, inp.b_x
    sd = math.sqrt(d)
    l2g = math.log(2.0 / inp.gamma)
    if key in ("gcn", "resgcn"):
        c1 = max(1.0, sd * bw) if key == "gcn" else 1.0 + sd * bw
        c2 = sd * (1.0 + bx)
        la = L * math.log(c1) + math.log(c2)
        lg = l2g + math.log(L + 1) + la
        return la, lg, lg + _lse(math.log(L + 2) + la, math.log(2.0))
    if key == "appnp":
        lc1 = _log_b_d_alpha(d, L, inp.alpha) + math.log(bx)
        lc2 = math.log(max(1.0, bw))
        l4g = math.log(4.0 / inp.gamma)
        return lc1 + math.log(bw), l4g + lc1, l4g + lc1 + _lse(lc1 + lc2, 0.0)
    if key == "gcnii":
        a, b = inp.alpha, inp.beta
        _, b_w_beta, b_ldb = helper_constants(inp)
        c1 = max(1.0, a * sd * b_w_beta)
        c2 = sd + b_ldb * bx
        la = L * math.log(c1) + math.log(c2)
        lb = _log(b)
        rho = lb + la
        g = lb + l2g + math.log(L + 1) + la
        inner = _lse(_log(a * b * L + b * bw + 2.0) + la, _log(2.0 * b))
        lf = _log(a) + lb + l2g + math.log(L + 1) + math.log(sd) + la + inner
        return rho, g, lf
    if key == "dgcn":
        la = L * math.log(sd) + math.log(bx)
        lg = l2g + math.log(L + 1) + la
        return la, lg, lg + _lse(la + math.log(max(1.0, bw)), 0.0)
    raise ValueError(f"no stability constants for architecture {arch!r}; choose from {', '.join(BOUND_ARCHS)}")


def _linear_constants(arch: str, inp: StabilityInputs) -> tuple[float, float, float]:
    key = arch.lower()
    L, d, bw, bx = inp.L, inp.d, inp.b_w, inp.b_x
    sd = math.sqrt(d)
    g2 = 2.0 / inp.gamma
    if key in ("gcn", "resgcn"):
        c1 = max(1.0, sd * bw) if key == "gcn" else 1.0 + sd * bw
        a = c1 ** L * (sd * (1.0 + bx))
        g = g2 * (L + 1) * a
        return a, g, g * ((L + 2) * a + 2.0)
    if key == "appnp":
        b_d_alpha = (1.0 - inp.alpha) * sum((inp.alpha * sd) ** (l - 1) for l in range(1, L + 1)) \
            + (inp.alpha * sd) ** L
        c1 = b_d_alpha * bx
        g = (4.0 / inp.gamma) * c1
        return c1 * bw, g, g * (c1 * max(1.0, bw) + 1.0)
    if key == "gcnii":
        al, b = inp.alpha, inp.beta
        _, b_w_beta, b_ldb = helper_constants(inp)
        a = max(1.0, al * sd * b_w_beta) ** L * (sd + b_ldb * bx)
        lf = al * b * g2 * (L + 1) * sd * a * ((al * b * L + b * bw + 2.0) * a + 2.0 * b)
        return b * a, b * g2 * (L + 1) * a, lf
    if key == "dgcn":
        a = sd ** L * bx
        g = g2 * (L + 1) * a
        return a, g, g * (a * max(1.0, bw) + 1.0)
    raise ValueError(f"no stability constants for architecture {arch!r}; choose from {', '.join(BOUND_ARCHS)}")


def constants_for(arch: str, inp: StabilityInputs) -> StabilityConstants:
    """Explicit ``(rho_f, G_f, L_f)``; plain arithmetic unless a value overflows."""
    lr, lg, ll = log_constants(arch, inp)
    if max(lr, lg, ll) < math.log(OVERFLOW) - 1.0:
        r, g, lf = _linear_constants(arch, inp)
        return StabilityConstants(r, g, lf, log_rho_f=lr, log_g_f=lg, log_l_f=ll)
    (r, o1), (g, o2), (lf, o3) = _exp(lr), _exp(lg), _exp(ll)
    return StabilityConstants(r, g, lf, log_rho_f=lr, log_g_f=lg, log_l_f=ll, overflow=o1 or o2 or o3)


def _const_logs(c: StabilityConstants) -> tuple[float, float, float]:
    def pick(lv, v):
        return lv if not math.isnan(lv) else _log(v)
    return pick(c.log_rho_f, c.rho_f), pick(c.log_g_f, c.g_f), pick(c.log_l_f, c.l_f)


def _log_geometric_sum(log_x: float, t: int) -> float:
    """log of ``sum_{k=0}^{t-1} (1+x)^k`` for ``x = exp(log_x) >= 0``."""
    if log_x == _NEG_INF or log_x < math.log(1e-14):
        return math.log(t)
    if log_x > 40:
        l1p = log_x + math.log1p(math.exp(-log_x))
    else:
        l1p = math.log1p(math.exp(log_x))
    a = t * l1p
    # log((e^a - 1) / x) = a + log(1 - e^-a) - log x
    return a + math.log(-math.expm1(-a)) - log_x


def log_epsilon_stability(constants: StabilityConstants, inp: StabilityInputs) -> float:
    lr, lg, ll = _const_logs(constants)
    return (math.log(2.0 * inp.eta) + lr + lg - math.log(inp.m)
            + _log_geometric_sum(math.log(inp.eta) + ll, inp.t))


def epsilon_stability(constants: StabilityConstants, inp: StabilityInputs) -> float:
    """``(2 eta rho G / m) * sum_{t=1}^T (1 + eta L_f)^(t-1)``; ``inf`` past the overflow limit."""
    if inp.t < 1:
        raise ValueError("T must be at least 1")
    le = log_epsilon_stability(constants, inp)
    if le < math.log(OVERFLOW) - 1.0 and math.isfinite(constants.l_f):
        x = inp.eta * constants.l_f
        if x < 1e-14:
            s = float(inp.t)
        else:
            s = math.expm1(inp.t * math.log1p(x)) / x
        return 2.0 * inp.eta * constants.rho_f * constants.g_f / inp.m * s
    return _exp(le)[0]


def stability_for(arch: str, inp: StabilityInputs) -> StabilityConstants:
    """Constants plus epsilon in one record."""
    c = constants_for(arch, inp)
    eps = epsilon_stability(c, inp)
    o = math.isinf(eps)
    return StabilityConstants(c.rho_f, c.g_f, c.l_f, eps, c.log_rho_f, c.log_g_f, c.log_l_f, c.overflow or o)


def transductive_bound(train_loss: float, epsilon: float, inp: StabilityInputs) -> float:
    """Train loss plus the stability and concentration terms (hidden constants set to 1)."""
    q = inp.q
    ld = math.log(1.0 / inp.delta)
    return train_loss + (2.0 / inp.gamma) * epsilon * math.sqrt(q * ld) + ld / math.sqrt(q)


# ------------------------------------------------------------------ convergence

class RankDeficiencyError(ValueError):
    """The last hidden representation is not full rank (alpha0 = 0)."""


@dataclass(frozen=True)
class ConvergenceRequirements:
    eta_max: float
    t_min: int
    init_conditions_ok: bool
    conditions: tuple[bool, bool, bool]
    lambdas: tuple[float, ...]
    c: tuple[float, ...]
    eta: float


def default_c(alpha0: float, weight_norms, s: float, x_frob: float, loss0: float,
              max_iter: int = 200, tol: float = 1e-12, slack: float = 1e-6) -> np.ndarray:
    """Smallest ``C`` with ``C_l = k prod_{j != l} lambda_j``, ``k = 16/alpha0^2 s^L ||X|| sqrt(2 L0)``.

    Found by fixed-point iteration from ``C = 0``; ``k`` is inflated by ``slack``
    so the first initialization condition is not lost to rounding. Returns
    ``inf`` entries when the iteration runs away.
    """
    w = np.asarray(weight_norms, dtype=np.float64)
    L = w.size - 1
    k = (1.0 + slack) * 16.0 / alpha0 ** 2 * s ** L * x_frob * math.sqrt(2.0 * loss0)
    c = np.zeros_like(w)
    for _ in range(max_iter):
        lam = w + c
        with np.errstate(over="ignore"):
            new = np.array([k * np.prod(np.delete(lam, i)) for i in range(w.size)])
        if not np.all(np.isfinite(new)) or np.any(new > OVERFLOW):
            return np.full_like(w, np.inf)
        if np.max(np.abs(new - c)) <= tol * max(1.0, np.max(np.abs(new))):
            return new
        c = new
    return np.full_like(w, np.inf)


def convergence_requirements(loss0: float, eps_target: float, alpha0: float, lambdas=None,
                             s: float = 1.0, b_x_frob: float = 1.0, L: int | None = None, *,
                             c=None, weight_norms=None, eta: float | None = None) -> ConvergenceRequirements:
    """Learning-rate cap, iteration count and initialization checks for gradient descent on a deep linear-output GCN.

    Layers are indexed ``1..L+1`` (the last is the linear output layer). Pass
    either ``lambdas`` together with ``c``, or the initial ``weight_norms``
    (``c`` then defaults to :func:`default_c`). ``eta`` defaults to ``eta_max``.
    """
    if alpha0 <= 0:
        raise RankDeficiencyError("alpha0 must be positive: the last hidden layer needs width >= N")
    if loss0 < 0 or eps_target <= 0:
        raise ValueError("loss0 must be non-negative and eps_target positive")
    if lambdas is None:
        if weight_norms is None:
            raise ValueError("give lambdas or weight_norms")
        w = np.asarray(weight_norms, dtype=np.float64)
        cc = default_c(alpha0, w, s, b_x_frob, loss0) if c is None else np.asarray(c, dtype=np.float64)
        lam = w + cc
    else:
        if c is None:
            raise ValueError("c is required together with explicit lambdas")
        lam = np.asarray(lambdas, dtype=np.float64)
        cc = np.asarray(c, dtype=np.float64)
    if L is None:
        L = lam.size - 1
    if lam.size != L + 1 or cc.size != L + 1:
        raise ValueError(f"expected {L + 1} per-layer values (hidden layers plus the output layer)")
    if np.any(lam <= 0) or np.any(cc <= 0):
        raise ValueError("lambdas and C must be positive")

    with np.errstate(over="ignore", invalid="ignore"):
        prod_all = float(np.prod(lam))
        prod_hidden = float(np.prod(lam[:L]))
        s2l = s ** (2 * L)
        root = math.sqrt(2.0 * loss0)
        x1, x2 = b_x_frob, b_x_frob ** 2
        inv2 = lam ** -2.0
        hidden_sum = float(np.sum(prod_hidden ** 2 * inv2[:L]))
        cond1 = alpha0 ** 2 >= 16 * s2l * x1 * float(np.max(prod_all / (lam * cc))) * root
        cond2 = alpha0 ** 3 >= 32 * s2l * x2 * lam[L] * hidden_sum * root
        cond3 = alpha0 ** 2 >= 16 * s2l * x2 * lam[L] ** 2 * hidden_sum
        second = float(np.sum(inv2[:L])) / (s2l * prod_all ** 2 * x2 * float(np.sum(inv2)) ** 2)
    eta_max = min(8.0 / alpha0 ** 2, second)
    eta = eta_max if eta is None else eta
    if eta <= 0:
        raise ValueError("eta must be positive")
    conds = (bool(cond1), bool(cond2), bool(cond3))
    return ConvergenceRequirements(eta_max, t_min_for(eta, alpha0, loss0, eps_target), all(conds), conds,
                                   tuple(lam.tolist()), tuple(cc.tolist()), eta)


def t_min_for(eta: float, alpha0: float, loss0: float, eps_target: float) -> int:
    """``ceil(8 / (eta alpha0^2) * ln(loss0 / eps))``, zero when already below target."""
    if loss0 <= eps_target:
        return 0
    x = 8.0 / (eta * alpha0 ** 2) * math.log(loss0 / eps_target)
    # absorb rounding noise so exact integers are not bumped up by one
    return int(math.ceil(x * (1.0 - 1e-12)))


# --------------------------------------------------------------------- richness

MAX_TREE_ENUMERATION = 5_000_000


def richness_lower_bound(d: int, L: int) -> int:
    if d < 2 or L < 1:
        raise ValueError("need d >= 2 and L >= 1")
    return 2 * (d - 1) ** (L - 1)


def count_computation_trees(d: int, L: int, limit: int = MAX_TREE_ENUMERATION) -> int:
    """Number of distinct depth-``L`` computation trees with binary node features.

    Every internal node has ``d`` children. Below the root, a node's children
    must include one carrying its parent's feature. Children are stored as
    sorted tuples so isomorphic trees coincide. Raises ``OverflowError`` when
    the enumeration would exceed ``limit`` trees.
    """
    if d < 2 or L < 1:
        raise ValueError("need d >= 2 and L >= 1")
    if d > 4 or L > 4:
        raise OverflowError("enumeration is limited to d <= 4 and L <= 4")

    cache: dict[tuple[int, int | None], list] = {}

    def trees(height: int, parent: int | None) -> list:
        key = (height, parent)
        if key in cache:
            return cache[key]
        out = []
        for f in (0, 1):
            if height == 1:
                out.append((f,))
                continue
            kids = trees(height - 1, f)
            if math.comb(len(kids) + d - 1, d) > limit:
                raise OverflowError(f"more than {limit} candidate trees for d={d}, L={L}")
            for combo in combinations_with_replacement(kids, d):
                if parent is None or any(k[0] == parent for k in combo):
                    out.append((f, combo))
        cache[key] = out
        return out

    return len(set(trees(L, None)))
