"""Samplers for the limiting jump processes.

``sample_levy`` draws the compound-Poisson part of the symmetric stable-type
process with jumps of size at least ``cutoff``.  ``sample_thinned`` proposes
the same jumps and accepts each with probability ``1 - u(s, arrival)``,
where ``u`` is a stored solution of the hydrodynamic equation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .hydro import HydroTrajectory
from .kernel import LevyExponent


@dataclass
class LevyPath:
    times: np.ndarray
    jumps: np.ndarray  # (N, dim)
    cutoff: float
    horizon: float
    small_jump_variance: float = 0.0

    @property
    def dim(self) -> int:
        return self.jumps.shape[1]

    def position(self, t: float) -> np.ndarray:
        if t < 0 or t > self.horizon + 1e-12:
            raise ValueError("time outside the path horizon")
        k = np.searchsorted(self.times, t, side="right")
        return self.jumps[:k].sum(axis=0)

    def positions(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        cum = np.vstack([np.zeros((1, self.dim)), np.cumsum(self.jumps, axis=0)])
        return cum[np.searchsorted(self.times, times, side="right")]

    @property
    def end(self) -> np.ndarray:
        return self.jumps.sum(axis=0)


@dataclass
class ThinnedPath:
    """Proposed jumps with their acceptance draws; accepted ones form the path."""

    times: np.ndarray
    proposals: np.ndarray  # (N, dim)
    draws: np.ndarray
    accepted: np.ndarray  # bool
    cutoff: float
    horizon: float

    @property
    def dim(self) -> int:
        return self.proposals.shape[1]

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[self.accepted]

    @property
    def jumps(self) -> np.ndarray:
        return self.proposals[self.accepted]

    def positions(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        cum = np.vstack([np.zeros((1, self.dim)), np.cumsum(self.jumps, axis=0)])
        return cum[np.searchsorted(self.jump_times, times, side="right")]

    @property
    def end(self) -> np.ndarray:
        return self.jumps.sum(axis=0)

    def to_csv(self, path) -> None:
        """Rows ``(time, z_1..z_d, accepted)``: position after each proposal."""
        pos = np.zeros(self.dim)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"z_{a + 1}" for a in range(self.dim)] + ["accepted"])
            w.writerow([0.0] + [0.0] * self.dim + [1])
            for t, x, ok in zip(self.times, self.proposals, self.accepted):
                if ok:
                    pos = pos + x
                w.writerow([repr(float(t))] + [repr(float(c)) for c in pos] + [int(ok)])


def _draw_jumps(exponent: LevyExponent, cutoff: float, count: int, rng) -> np.ndarray:
    """``count`` i.i.d. jumps from ``q 1{|x| >= cutoff}`` normalised."""
    a = exponent.alpha
    if exponent.dim == 1:
        hi = exponent.outer
        lo_p, hi_p = cutoff**-a, (0.0 if math.isinf(hi) else hi**-a)
        u = rng.random(count)
        r = (lo_p - u * (lo_p - hi_p)) ** (-1.0 / a)
        sign = np.where(rng.random(count) < 0.5, -1.0, 1.0)
        return (sign * r)[:, None]
    # d = 2: radial Pareto on the disc enclosing the box, then keep points in the box
    out = np.empty((0, 2))
    hi = exponent.outer * math.sqrt(2)
    lo_p, hi_p = cutoff**-a, (0.0 if math.isinf(hi) else hi**-a)
    while out.shape[0] < count:
        m = 2 * (count - out.shape[0]) + 8
        r = (lo_p - rng.random(m) * (lo_p - hi_p)) ** (-1.0 / a)
        th = 2 * np.pi * rng.random(m)
        pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
        keep = np.abs(pts).max(axis=1) <= exponent.outer
        out = np.vstack([out, pts[keep]])
    return out[:count]


def sample_levy(exponent: LevyExponent, horizon: float, cutoff: float, rng: np.random.Generator) -> LevyPath:
    """Compound Poisson jumps of intensity ``q(x) dx`` on ``|x| >= cutoff``."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rate = exponent.tail_rate(cutoff)
    count = int(rng.poisson(rate * horizon)) if horizon > 0 else 0
    times = np.sort(rng.random(count) * horizon)
    jumps = _draw_jumps(exponent, cutoff, count, rng) if count else np.zeros((0, exponent.dim))
    return LevyPath(times, jumps, cutoff, horizon, exponent.small_jump_variance(cutoff))


def sample_thinned(u: HydroTrajectory, exponent: LevyExponent, horizon: float, cutoff: float,
                   rng: np.random.Generator) -> ThinnedPath:
    """Thin ``sample_levy`` proposals by ``1 - u(s, Z_s- + x)``."""
    if horizon > u.horizon + 1e-12:
        raise ValueError("density trajectory shorter than the horizon")
    if u.frames.min() < -1e-12 or u.frames.max() > 1 + 1e-12:
        raise ValueError("density values must lie in [0, 1]")
    if u.dim != exponent.dim:
        raise ValueError("density and exponent dimensions differ")
    prop = sample_levy(exponent, horizon, cutoff, rng)
    draws = rng.random(prop.times.size)
    accepted = np.zeros(prop.times.size, bool)
    pos = np.zeros(exponent.dim)
    for j in range(prop.times.size):
        target = pos + prop.jumps[j]
        arg = target[0] if exponent.dim == 1 else target
        if draws[j] <= 1.0 - float(u.value(prop.times[j], arg)):
            accepted[j] = True
            pos = target
    return ThinnedPath(prop.times, prop.jumps, draws, accepted, cutoff, horizon)


# ---------------------------------------------------------------------------
# Martingale of the thinned process
# ---------------------------------------------------------------------------

@dataclass
class CompensatorTable:
    """``C(s, z) = int q_eps(x) (1 - e^{i beta x}) (1 - u(s, x + z)) dx`` on a grid.

    Rows are the snapshot times of ``u``, columns a periodic ``z`` grid
    ``refine`` times finer than the density grid.
    """

    times: np.ndarray
    values: np.ndarray  # (T, Gz) complex
    side: float
    origin: float
    beta: float
    cutoff: float

    def at(self, z: float) -> np.ndarray:
        """Column ``C(., z)`` by periodic linear interpolation in ``z``."""
        g = self.values.shape[1]
        h = self.side / g
        f = ((z - self.origin) / h) % g
        i0 = int(math.floor(f))
        w = f - i0
        i0 %= g
        return (1 - w) * self.values[:, i0] + w * self.values[:, (i0 + 1) % g]

    def integral(self, z: float, a: float, b: float) -> complex:
        """``int_a^b C(s, z) ds`` exactly for ``C`` piecewise linear in time."""
        col = self.at(z)
        return complex(self._cumulative(col, b) - self._cumulative(col, a))

    def _cumulative(self, col, s):
        t = self.times
        if s <= t[0]:
            return 0.0
        seg = 0.5 * (col[1:] + col[:-1]) * np.diff(t)
        k = min(int(np.searchsorted(t, s, side="right") - 1), t.size - 2)
        head = seg[:k].sum()
        ds = s - t[k]
        slope = (col[k + 1] - col[k]) / (t[k + 1] - t[k])
        return head + ds * col[k] + 0.5 * ds * ds * slope


def compensator_table(u: HydroTrajectory, exponent: LevyExponent, beta: float, cutoff: float,
                      refine: int = 8) -> CompensatorTable:
    """Build ``C`` via the Fourier identity
    ``int q_eps(x)(1 - e^{i beta x}) e^{ik(x+z)} dx = e^{ikz}(psi_eps(k+beta) - psi_eps(k))``,
    applied to the trigonometric interpolant of each snapshot (d = 1).
    """
    if u.dim != 1:
        raise NotImplementedError("compensator tables are implemented for d = 1")
    beta = float(beta)
    g = u.frames.shape[1]
    k = 2 * np.pi * np.fft.fftfreq(g, d=u.side / g)
    psi_k = {}

    def psi_e(x):
        key = round(float(x), 12)
        if key not in psi_k:
            psi_k[key] = float(exponent.psi(abs(x), cutoff=cutoff))
        return psi_k[key]

    mult = np.array([psi_e(kk + beta) - psi_e(kk) for kk in k])
    base = psi_e(beta)
    spec = np.fft.fft(u.frames, axis=1) / g
    # keep the Nyquist mode real by splitting it between +-k
    gz = g * refine
    full = np.zeros((u.frames.shape[0], gz), complex)
    half = g // 2
    full[:, :half] = spec[:, :half] * mult[:half]
    full[:, gz - half + 1:] = spec[:, half + 1:] * mult[half + 1:]
    if g % 2 == 0:
        kn = k[half]
        mp = psi_e(abs(kn) + beta) - psi_e(abs(kn))
        mm = psi_e(-abs(kn) + beta) - psi_e(abs(kn))
        full[:, half] = 0.5 * spec[:, half] * mp
        full[:, gz - half] = 0.5 * spec[:, half] * mm
    else:
        full[:, half] = spec[:, half] * mult[half]
    # phases are referenced to the field origin
    conv = np.fft.ifft(full, axis=1) * gz
    values = base - conv
    return CompensatorTable(u.times.copy(), values, u.side, u.origin, beta, cutoff)


def limit_martingale_check(path: ThinnedPath, table: CompensatorTable, times) -> np.ndarray:
    """``M_t = exp{i beta Z_t + int_0^t C(s, Z_s) ds}`` at each requested time."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size and times.max() > min(path.horizon, table.times[-1]) + 1e-12:
        raise ValueError("times beyond the path or table horizon")
    jt = path.jump_times
    jz = path.jumps[:, 0]
    out = np.empty(times.size, complex)
    for m, t in enumerate(times):
        acc = 0.0j
        z = 0.0
        s = 0.0
        for tj, dz in zip(jt, jz):
            if tj > t:
                break
            acc += table.integral(z, s, tj)
            z += dz
            s = tj
        acc += table.integral(z, s, t)
        out[m] = np.exp(1j * table.beta * z + acc)
    return out
