"""Estimators and tests used to check the limit theorems on finite samples."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.spatial.distance import cdist, pdist, squareform

from .lattice import site_positions


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("samples must be a vector or an (N, d) array")
    return x


def _as_betas(betas, dim: int) -> np.ndarray:
    b = np.asarray(betas, dtype=float)
    if b.ndim == 0:
        b = b[None]
    if b.ndim == 1:
        b = b[:, None] if dim == 1 else b[None, :]
    if b.shape[1] != dim:
        raise ValueError("beta dimension does not match the samples")
    return b


# ---------------------------------------------------------------------------
# Characteristic functions
# ---------------------------------------------------------------------------

@dataclass
class CfEstimate:
    betas: np.ndarray  # (B, d)
    estimates: np.ndarray  # (B,) complex
    stderr: np.ndarray  # (B, 2): real and imaginary parts
    count: int

    @property
    def modulus_stderr(self) -> np.ndarray:
        return np.hypot(self.stderr[:, 0], self.stderr[:, 1])

    def is_bounded(self) -> bool:
        return bool(np.all(np.abs(self.estimates) <= 1 + 3 * self.modulus_stderr + 1e-12))


def _mean_with_se(values: np.ndarray):
    """Column means of complex values with componentwise standard errors."""
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, np.zeros((values.shape[1], 2))
    se = np.column_stack([values.real.std(axis=0, ddof=1), values.imag.std(axis=0, ddof=1)]) / math.sqrt(n)
    return mean, se


def empirical_cf(samples, betas) -> CfEstimate:
    """Sample mean of ``exp(i beta . X)`` per beta."""
    x = _as_samples(samples)
    if x.shape[0] < 1:
        raise ValueError("empirical_cf needs at least one sample")
    b = _as_betas(betas, x.shape[1])
    vals = np.exp(1j * (x @ b.T))
    mean, se = _mean_with_se(vals)
    return CfEstimate(b, mean, se, x.shape[0])


def martingale_cv_cf(samples, martingales, betas, exponents) -> CfEstimate:
    """Characteristic function with the exponential martingale as control variate.

    Each replica contributes ``e^{i beta X} - e^{-c}(M - 1)`` where ``M`` is
    the replica's martingale value (mean exactly 1) and ``c`` the target
    exponent, so the estimator stays unbiased while the part of
    ``e^{i beta X}`` explained by ``M`` cancels.
    """
    x = _as_samples(samples)
    b = _as_betas(betas, x.shape[1])
    m = np.asarray(martingales, dtype=complex).reshape(x.shape[0], b.shape[0])
    c = np.asarray(exponents, dtype=float).reshape(1, -1)
    vals = np.exp(1j * (x @ b.T)) - np.exp(-c) * (m - 1.0)
    mean, se = _mean_with_se(vals)
    return CfEstimate(b, mean, se, x.shape[0])


@dataclass
class CfReport:
    betas: list
    deviation: list
    zscore: list
    stderr: list
    max_deviation: float
    target: list


def cf_convergence_test(estimate: CfEstimate, target: Callable[[np.ndarray], complex]) -> CfReport:
    """Per-beta deviation ``|estimate - target|`` and its z-score."""
    tgt = np.array([complex(target(b if b.size > 1 else float(b[0]))) for b in estimate.betas])
    dev = np.abs(estimate.estimates - tgt)
    se = estimate.modulus_stderr
    z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 0, np.inf, 0.0))
    return CfReport(estimate.betas.tolist(), dev.tolist(), z.tolist(), se.tolist(),
                    float(dev.max()) if dev.size else 0.0, [[t.real, t.imag] for t in tgt])


@dataclass
class LadderReport:
    ladder: list
    deviations: list  # per n, per beta
    decreasing: list  # per beta
    final_ok: bool
    verdict: bool


def ladder_verdict(ladder: Sequence[int], reports: Sequence[CfReport], threshold: float = 0.05) -> LadderReport:
    """Deviation decreases along the ladder at every beta and the last rung is
    within ``threshold + 3 stderr``."""
    dev = np.array([r.deviation for r in reports])
    dec = np.all(np.diff(dev, axis=0) < 0, axis=0)
    last = reports[-1]
    final_ok = bool(np.all(dev[-1] <= threshold + 3 * np.asarray(last.stderr)))
    return LadderReport(list(ladder), dev.tolist(), dec.tolist(), final_ok, bool(dec.all() and final_ok))


# ---------------------------------------------------------------------------
# Two-sample tests
# ---------------------------------------------------------------------------

def _pair_sums_sorted(z: np.ndarray, mask: np.ndarray) -> float:
    """Sum of ``z_j - z_i`` over pairs ``i < j`` inside ``mask`` (``z`` sorted)."""
    zm = np.where(mask, z, 0.0)
    c = np.cumsum(mask)
    s = np.cumsum(zm)
    return float((zm * (c - 1) - np.where(mask, s - z, 0.0)).sum())


def _energy_1d(z: np.ndarray, a_mask: np.ndarray, n: int, m: int, s_all: float) -> float:
    s_aa = _pair_sums_sorted(z, a_mask)
    s_bb = _pair_sums_sorted(z, ~a_mask)
    s_ab = s_all - s_aa - s_bb
    return n * m / (n + m) * (2 * s_ab / (n * m) - 2 * s_aa / n**2 - 2 * s_bb / m**2)


def energy_distance(samples_a, samples_b, permutations: int = 999,
                    rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Scaled energy statistic ``nm/(n+m) (2E|A-B| - E|A-A'| - E|B-B'|)`` and
    permutation p-value ``(1 + #{perm >= obs}) / (1 + permutations)``.

    One-dimensional samples use an O(N) pass over the pooled sorted values
    per permutation; higher dimensions use the full distance matrix.
    """
    a, b = _as_samples(samples_a), _as_samples(samples_b)
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("both samples must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("samples live in different dimensions")
    rng = np.random.default_rng() if rng is None else rng
    if a.shape[1] == 1:
        pooled = np.concatenate([a[:, 0], b[:, 0]])
        order = np.argsort(pooled, kind="stable")
        z = pooled[order]
        labels = np.zeros(n + m, bool)
        labels[:n] = True
        s_all = _pair_sums_sorted(z, np.ones(n + m, bool))
        obs = _energy_1d(z, labels[order], n, m, s_all)
        count = 0
        for _ in range(permutations):
            perm = rng.permutation(labels)
            if _energy_1d(z, perm, n, m, s_all) >= obs - 1e-12 * max(1.0, abs(obs)):
                count += 1
        return max(obs, 0.0), (1 + count) / (1 + permutations)
    pooled = np.vstack([a, b])
    d = squareform(pdist(pooled))

    def stat(idx_a, idx_b):
        return n * m / (n + m) * (2 * d[np.ix_(idx_a, idx_b)].mean()
                                  - d[np.ix_(idx_a, idx_a)].mean() - d[np.ix_(idx_b, idx_b)].mean())

    idx = np.arange(n + m)
    obs = stat(idx[:n], idx[n:])
    count = 0
    for _ in range(permutations):
        p = rng.permutation(idx)
        if stat(p[:n], p[n:]) >= obs - 1e-12 * max(1.0, abs(obs)):
            count += 1
    return max(obs, 0.0), (1 + count) / (1 + permutations)


def distance_covariance_test(x, y, permutations: int = 499,
                             rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Squared sample distance covariance with a permutation p-value."""
    x, y = _as_samples(x), _as_samples(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("paired samples required")
    rng = np.random.default_rng() if rng is None else rng

    def centred(v):
        d = cdist(v, v)
        return d - d.mean(axis=0) - d.mean(axis=1)[:, None] + d.mean()

    ax, by = centred(x), centred(y)
    obs = float((ax * by).mean())
    count = 0
    for _ in range(permutations):
        p = rng.permutation(x.shape[0])
        if float((ax * by[np.ix_(p, p)]).mean()) >= obs:
            count += 1
    return obs, (1 + count) / (1 + permutations)


# ---------------------------------------------------------------------------
# Tail index
# ---------------------------------------------------------------------------

def hill_tail_index(samples, k: int) -> float:
    """Hill estimator ``1 / mean(log(X_(i) / X_(k+1)))`` over the top ``k``."""
    x = np.abs(np.asarray(samples, dtype=float).ravel())
    if not 2 <= k < x.size:
        raise ValueError(f"k must satisfy 2 <= k < {x.size}, got {k}")
    top = np.sort(x)[::-1][: k + 1]
    if top[k] <= 0:
        raise ValueError("order statistic X_(k+1) is not positive")
    gamma = np.log(top[:k] / top[k]).mean()
    if gamma <= 0:
        raise ValueError("degenerate order statistics (top values coincide)")
    return float(1.0 / gamma)


@dataclass
class HillReport:
    estimate: float
    stderr: float
    estimate_quarter_k: float
    flagged: bool
    reason: str = ""


def hill_report(samples, k: int, upper: float = 2.0) -> HillReport:
    """Hill estimate with a plausibility flag.

    Flags when the estimate exceeds ``upper`` by more than 3 standard errors
    (no stable-type tail) or moves by more than 3 combined standard errors
    between ``k`` and ``k/4`` (no stable power regime).
    """
    est = hill_tail_index(samples, k)
    k4 = max(2, k // 4)
    est4 = hill_tail_index(samples, k4)
    se, se4 = est / math.sqrt(k), est4 / math.sqrt(k4)
    reasons = []
    if est - 3 * se > upper:
        reasons.append(f"estimate above {upper}")
    if abs(est - est4) > 3 * math.hypot(se, se4):
        reasons.append("estimate drifts with k")
    return HillReport(est, se, est4, bool(reasons), "; ".join(reasons))


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------

def bernoulli_entropy(u, rho: float) -> np.ndarray:
    """``u log(u/rho) + (1-u) log((1-u)/(1-rho))`` with ``0 log 0 = 0``."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0) / rho), 0.0)
        b = np.where(u < 1, (1 - u) * np.log(np.where(u < 1, 1 - u, 1.0) / (1 - rho)), 0.0)
    return a + b


@dataclass
class EntropyReport:
    n: int
    profile: str
    rho: float
    total: float
    normalized: float


def relative_entropy(u0: Callable, rho: float, n: int, side: int, dim: int = 1,
                     profile: str = "") -> EntropyReport:
    """Entropy of the product measure with marginals ``u0(x/n)`` relative to
    Bernoulli(``rho``) over the ``side^dim`` torus window."""
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie strictly inside (0, 1)")
    x = site_positions(side, dim, n)
    u = np.asarray(u0(x if dim > 1 else x[:, 0]), dtype=float).reshape(-1)
    if np.any(u < 0) or np.any(u > 1):
        raise ValueError("profile values must lie in [0, 1]")
    h = float(bernoulli_entropy(u, rho).sum())
    return EntropyReport(n, profile, rho, h, h / n**dim)


def entropy_density_integral(u0: Callable, rho: float, lower: float = -np.inf, upper: float = np.inf) -> float:
    """``int h(u0(x)) dx`` over an interval (d = 1) by adaptive quadrature."""
    f = lambda s: float(bernoulli_entropy(u0(np.array([s])), rho)[0])
    val, _ = integrate.quad(f, lower, upper, epsabs=1e-13, epsrel=1e-11, limit=400)
    return val


# ---------------------------------------------------------------------------
# Additive functional
# ---------------------------------------------------------------------------

@dataclass
class LlnReport:
    n: int | None
    count: int
    mean: list  # [real, imag]
    stderr: list
    std: list
    variance: float
    target: list
    zscore: float
    within_3se: bool
    within_3sd: bool


def lln_functional_test(values, target: complex, n: int | None = None) -> LlnReport:
    """Replica mean of the scaled functional against its limit ``target``.

    ``variance`` is the total across-replica variance ``Var Re + Var Im``;
    closeness is judged componentwise against both the standard error and
    the across-replica standard deviation.
    """
    v = np.asarray(values, dtype=complex).ravel()
    if v.size < 100:
        raise ValueError("at least 100 replicas are required")
    mean = v.mean()
    sd = np.array([v.real.std(ddof=1), v.imag.std(ddof=1)])
    se = sd / math.sqrt(v.size)
    dev = np.abs(np.array([mean.real - target.real, mean.imag - target.imag]))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 1e-15, np.inf, 0.0))
    return LlnReport(n, int(v.size), [mean.real, mean.imag], se.tolist(), sd.tolist(),
                     float(sd @ sd), [float(np.real(target)), float(np.imag(target))], float(z.max()),
                     bool(np.all(dev <= 3 * se + 1e-15)), bool(np.all(dev <= 3 * sd + 1e-15)))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return _plain(asdict(obj))
    return obj


def report_json(experiment: str, statistic, ci, verdict: bool, **extra) -> str:
    """JSON document with the fields (experiment, statistic, ci, verdict)."""
    doc = {"experiment": experiment, "statistic": _plain(statistic), "ci": _plain(ci),
           "verdict": bool(verdict)}
    doc.update(_plain(extra))
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True)
