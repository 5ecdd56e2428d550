"""Long-jump rate family p(z) = p* |z|^-(d+alpha), its sampler and Levy exponent.

The lattice kernel lives on the box ``0 < |z|_inf <= R`` and is renormalised
there.  The continuum density ``q(u) = p* |u|^-(d+alpha)`` uses the same
normaliser so that lattice Riemann sums and continuum integrals are directly
comparable.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import integrate, special


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, error_estimate: float):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3g})")
        self.error_estimate = error_estimate


# ---------------------------------------------------------------------------
# Alias table (Vose)
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _build_alias(probs):
    k = probs.size
    scaled = probs * k
    prob = np.ones(k)
    alias = np.arange(k)
    small = np.empty(k, np.int64)
    large = np.empty(k, np.int64)
    ns = 0
    nl = 0
    for i in range(k):
        if scaled[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        nl -= 1
        g = large[nl]
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small[ns] = g
            ns += 1
        else:
            large[nl] = g
            nl += 1
    # leftovers are 1 up to rounding
    return prob, alias


@numba.njit(cache=True, nogil=True)
def alias_draw(u, prob, alias):
    """Map one uniform ``u`` in [0, 1) to a table index (column + coin from one draw)."""
    x = u * prob.size
    i = int(x)
    if i >= prob.size:
        i = prob.size - 1
    if x - i < prob[i]:
        return i
    return alias[i]


# ---------------------------------------------------------------------------
# Lattice normalisers
# ---------------------------------------------------------------------------

def _dirichlet_beta(s: float) -> float:
    return 4.0 ** (-s) * (special.zeta(s, 0.25) - special.zeta(s, 0.75))


def infinite_lattice_p_star(alpha: float, dim: int) -> float:
    """Normaliser of ``|z|^-(d+alpha)`` summed over all of Z^d minus the origin."""
    if dim == 1:
        return 1.0 / (2.0 * special.zeta(1.0 + alpha))
    if dim == 2:
        s = 1.0 + alpha / 2.0
        return 1.0 / (4.0 * special.zeta(s) * _dirichlet_beta(s))
    raise ValueError("only d = 1 and d = 2 are supported")


def _support(dim: int, radius: int) -> np.ndarray:
    axis = np.arange(-radius, radius + 1, dtype=np.int64)
    if dim == 1:
        z = axis[axis != 0][:, None]
    else:
        grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
        z = grid[np.any(grid != 0, axis=1)]
    return np.ascontiguousarray(z)


@dataclass(frozen=True, eq=False)
class JumpKernel:
    """Truncated, renormalised long-jump law on Z^d.

    ``offsets[k]`` is the k-th support vector and ``probs[k]`` its probability.
    ``p_star`` is the normaliser after truncation; ``p_star_infinite`` the
    constant of the untruncated series and ``tail_mass`` the mass that series
    puts outside the box.
    """

    alpha: float
    dim: int
    truncation_radius: int
    p_star: float
    p_star_infinite: float
    tail_mass: float
    offsets: np.ndarray
    probs: np.ndarray
    alias_prob: np.ndarray = field(repr=False)
    alias_index: np.ndarray = field(repr=False)

    @property
    def norms(self) -> np.ndarray:
        return np.sqrt((self.offsets.astype(float) ** 2).sum(axis=1))

    @property
    def rate_table(self) -> dict[tuple[int, ...], float]:
        return {tuple(int(c) for c in z): float(p) for z, p in zip(self.offsets, self.probs)}

    def rate(self, z) -> float:
        """p(z); zero off the support and at the origin."""
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        if z.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}")
        if not np.any(z) or np.max(np.abs(z)) > self.truncation_radius:
            return 0.0
        r = math.sqrt(float((z.astype(float) ** 2).sum()))
        return self.p_star * r ** (-(self.dim + self.alpha))

    def exponent(self, n: int | None = None, tol: float = 1e-8) -> "LevyExponent":
        """Continuum exponent sharing this kernel's ``p*``.

        With ``n`` given the continuum density is truncated to the box
        ``|u|_inf <= R/n``, the macroscopic image of the lattice support.
        """
        outer = math.inf if n is None else self.truncation_radius / n
        return LevyExponent(self.alpha, self.dim, self.p_star, outer=outer, tol=tol)


def build_kernel(alpha: float, dim: int, truncation_radius: int) -> JumpKernel:
    if not 0.0 < alpha < 2.0:
        raise ValueError(f"alpha must lie in (0, 2), got {alpha}")
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if int(truncation_radius) != truncation_radius or truncation_radius < 1:
        raise ValueError(f"truncation radius must be a positive integer, got {truncation_radius}")
    radius = int(truncation_radius)
    offsets = _support(dim, radius)
    norms = np.sqrt((offsets.astype(float) ** 2).sum(axis=1))
    weights = norms ** (-(dim + alpha))
    p_star = 1.0 / math.fsum(weights)
    probs = p_star * weights
    p_inf = infinite_lattice_p_star(alpha, dim)
    if dim == 1:
        tail = p_inf * 2.0 * special.zeta(1.0 + alpha, radius + 1.0)
    else:
        tail = 1.0 - p_inf / p_star
    prob, alias = _build_alias(probs)
    return JumpKernel(
        alpha=float(alpha),
        dim=dim,
        truncation_radius=radius,
        p_star=p_star,
        p_star_infinite=p_inf,
        tail_mass=float(tail),
        offsets=offsets,
        probs=probs,
        alias_prob=prob,
        alias_index=alias,
    )


def sample_jump(kernel: JumpKernel, rng: np.random.Generator) -> np.ndarray:
    k = alias_draw(rng.random(), kernel.alias_prob, kernel.alias_index)
    return kernel.offsets[k].copy()


def sample_jumps(kernel: JumpKernel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorised draws, shape ``(size, dim)``."""
    x = rng.random(size) * kernel.probs.size
    i = np.minimum(x.astype(np.int64), kernel.probs.size - 1)
    keep = (x - i) < kernel.alias_prob[i]
    idx = np.where(keep, i, kernel.alias_index[i])
    return kernel.offsets[idx]


def discrete_symbol(kernel: JumpKernel, beta, n: int) -> np.ndarray | float:
    """Lattice Riemann sum ``n^alpha sum_z p(z) (1 - cos(beta.z/n))``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    b = np.asarray(beta, dtype=float)
    scalar = b.ndim == 0 or (b.ndim == 1 and kernel.dim > 1 and b.shape == (kernel.dim,))
    b = b.reshape(-1, kernel.dim)
    phase = (kernel.offsets @ b.T) / n
    vals = n ** kernel.alpha * (kernel.probs @ (2.0 * np.sin(0.5 * phase) ** 2))
    return float(vals[0]) if scalar else vals


# ---------------------------------------------------------------------------
# Continuum exponent
# ---------------------------------------------------------------------------

def _quad(f, a, b, tol, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(f, a, b, epsabs=tol, epsrel=tol, limit=500, **kw)
        except integrate.IntegrationWarning as exc:
            val, err = integrate.quad(f, a, b, epsabs=tol, epsrel=tol, limit=500, **kw)
            raise QuadratureError(f"quadrature over [{a}, {b}] failed: {exc}", err) from None
    return val, err


def _sinc2(v):
    # (1 - cos v) / v^2 without cancellation
    h = 0.5 * v
    return 0.5 * np.sinc(h / np.pi) ** 2


def one_sided_integral(a: float, b: float, alpha: float, tol: float = 1e-10) -> float:
    """``int_a^b (1 - cos v) v^(-1-alpha) dv`` for 0 <= a < b <= inf."""
    if b <= a:
        return 0.0
    total = 0.0
    mid = min(b, 1.0)
    if a < mid:
        if a == 0.0:
            val, _ = _quad(_sinc2, 0.0, mid, tol, weight="alg", wvar=(1.0 - alpha, 0.0))
        else:
            val, _ = _quad(lambda v: _sinc2(v) * v ** (1.0 - alpha), a, mid, tol)
        total += val
    lo = max(a, 1.0)
    if b > lo:
        if math.isinf(b):
            power = lo ** (-alpha) / alpha
        else:
            power = (lo ** (-alpha) - b ** (-alpha)) / alpha
        g = lambda v: v ** (-1.0 - alpha)
        if math.isinf(b):
            osc, _ = _quad(g, lo, math.inf, tol, weight="cos", wvar=1.0)
        else:
            osc, _ = _quad(g, lo, b, tol, weight="cos", wvar=1.0)
        total += power - osc
    return total


@dataclass(frozen=True)
class LevyExponent:
    """Exponent ``psi(beta) = int (1 - cos beta.u) q(u) du`` of the symmetric jump density.

    ``outer`` truncates q to the box ``|u|_inf <= outer`` (``inf`` for the
    whole space).  Quantities taking a ``cutoff`` further drop ``|u| < cutoff``.
    """

    alpha: float
    dim: int
    p_star: float
    outer: float = math.inf
    tol: float = 1e-8

    def density(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        r = np.abs(u) if self.dim == 1 else np.sqrt((u**2).sum(axis=-1))
        box = np.abs(u) if self.dim == 1 else np.abs(u).max(axis=-1)
        with np.errstate(divide="ignore"):
            q = self.p_star * r ** (-(self.dim + self.alpha))
        return np.where((r > 0) & (box <= self.outer), q, 0.0)

    def _radial_limit(self, theta):
        return self.outer / max(abs(math.cos(theta)), abs(math.sin(theta)))

    def psi(self, beta, cutoff: float = 0.0) -> float | np.ndarray:
        b = np.asarray(beta, dtype=float)
        if self.dim == 1:
            flat = b.reshape(-1)
            out = np.array([self._psi1(x, cutoff) for x in flat])
            return float(out[0]) if b.ndim == 0 else out.reshape(b.shape)
        if b.ndim == 1:
            return self._psi2(b, cutoff)
        return np.array([self._psi2(x, cutoff) for x in b.reshape(-1, 2)])

    def _psi1(self, beta: float, cutoff: float) -> float:
        s = abs(beta)
        if s == 0.0:
            return 0.0
        tol = self.tol * 1e-2
        return 2.0 * self.p_star * s**self.alpha * one_sided_integral(
            s * cutoff, s * self.outer, self.alpha, tol
        )

    def _psi2(self, beta, cutoff: float) -> float:
        s = math.hypot(beta[0], beta[1])
        if s == 0.0:
            return 0.0
        phi = math.atan2(beta[1], beta[0])
        tol = self.tol * 1e-2

        def radial(theta):
            c = abs(s * math.cos(theta - phi))
            if c == 0.0:
                return 0.0
            rmax = self._radial_limit(theta)
            return c**self.alpha * one_sided_integral(c * cutoff, c * rmax, self.alpha, tol)

        pts = [k * math.pi / 4 for k in range(1, 8)]
        val, _ = _quad(radial, 0.0, 2 * math.pi, self.tol, points=pts)
        return self.p_star * val

    def tail_rate(self, cutoff: float) -> float:
        """Total intensity of jumps with ``|u| >= cutoff``."""
        if cutoff <= 0:
            raise ValueError("cutoff must be positive")
        a = self.alpha
        if self.dim == 1:
            if cutoff >= self.outer:
                return 0.0
            upper = 0.0 if math.isinf(self.outer) else self.outer ** (-a)
            return 2.0 * self.p_star * (cutoff ** (-a) - upper) / a

        def ang(theta):
            rmax = self._radial_limit(theta)
            return max(cutoff ** (-a) - rmax ** (-a), 0.0) if rmax > cutoff else 0.0

        if math.isinf(self.outer):
            return 2 * math.pi * self.p_star * cutoff ** (-a) / a
        val, _ = _quad(ang, 0.0, 2 * math.pi, self.tol, points=[k * math.pi / 4 for k in range(1, 8)])
        return self.p_star * val / a

    def small_jump_variance(self, cutoff: float) -> float:
        """``int_{|u| < cutoff} |u|^2 q(u) du`` (the part a cutoff sampler drops)."""
        a = self.alpha
        c = min(cutoff, self.outer)
        surface = 2.0 if self.dim == 1 else 2 * math.pi
        return surface * self.p_star * c ** (2.0 - a) / (2.0 - a)
