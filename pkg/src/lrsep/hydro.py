"""Fractional heat equation on a periodic box and empirical densities.

The evolution is ``du/dt = int q(y) (u(x+y) - u(x)) dy`` (principal value),
the density generator of the exclusion dynamics, with ``q`` truncated to the
box ``|y|_inf <= side/2`` so that the continuum sees the same jumps as the
wrapped lattice.  In Fourier space mode ``k`` decays at rate ``psi(k)``.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .kernel import JumpKernel, LevyExponent
from .lattice import LatticeState

log = logging.getLogger(__name__)

CLAMP_THRESHOLD = 1e-9


@dataclass
class DensityField:
    """Values on a uniform periodic grid over ``[origin, origin + side)^dim``."""

    values: np.ndarray
    side: float
    time: float = 0.0
    origin: float | None = None
    max_clamp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.origin is None:
            self.origin = -self.side / 2

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def grid_size(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return self.side / self.grid_size

    def axis(self) -> np.ndarray:
        return self.origin + self.spacing * np.arange(self.grid_size)

    def points(self) -> np.ndarray:
        ax = self.axis()
        if self.dim == 1:
            return ax
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"), axis=-1)

    def mass(self) -> float:
        return float(self.values.sum() * self.spacing**self.dim)

    def replace(self, values, time=None) -> "DensityField":
        return DensityField(values, self.side, self.time if time is None else time, self.origin)

    # -- persistence ---------------------------------------------------
    def to_csv(self, path) -> None:
        pts = self.points().reshape(-1, self.dim)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{a + 1}" for a in range(self.dim)] + ["u"])
            for p, v in zip(pts, self.values.reshape(-1)):
                w.writerow([repr(float(c)) for c in p] + [repr(float(v))])

    @classmethod
    def from_csv(cls, path, time: float = 0.0) -> "DensityField":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        dim = data.shape[1] - 1
        g = round(data.shape[0] ** (1 / dim))
        ax = np.unique(data[:, 0])
        spacing = ax[1] - ax[0]
        return cls(data[:, -1].reshape((g,) * dim), spacing * g, time, float(ax[0]))

    _HEADER = "<4sBIddd"

    def to_bytes(self) -> bytes:
        head = struct.pack(self._HEADER, b"DFLD", self.dim, self.grid_size,
                           self.side, self.origin, self.time)
        return head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DensityField":
        size = struct.calcsize(cls._HEADER)
        magic, dim, g, side, origin, time = struct.unpack(cls._HEADER, data[:size])
        if magic != b"DFLD":
            raise ValueError("not a density field blob")
        vals = np.frombuffer(data[size:], "<f8").reshape((g,) * dim).copy()
        return cls(vals, side, time, origin)


# ---------------------------------------------------------------------------
# Profile presets
# ---------------------------------------------------------------------------

def _radius2(x):
    x = np.asarray(x, dtype=float)
    return x**2 if x.ndim <= 1 else (x**2).sum(axis=-1)


def _constant(rho=0.5):
    return lambda x: np.full(np.shape(_radius2(x)), float(rho))


def _bump(background=0.3, amplitude=0.5, width=1.0):
    return lambda x: background + amplitude * np.exp(-_radius2(x) / width**2)


def _step(low=0.2, high=0.8, half_width=1.0, edge=0.25):
    def f(x):
        r = np.sqrt(_radius2(x))
        return low + (high - low) * 0.5 * (1.0 - np.tanh((r - half_width) / edge))
    return f


def _two_bump(background=0.3, amplitude=0.5, separation=2.0, width=0.5):
    def f(x):
        x = np.asarray(x, dtype=float)
        first = x if x.ndim <= 1 else x[..., 0]
        rest = 0.0 if x.ndim <= 1 else (x[..., 1:] ** 2).sum(axis=-1)
        a = np.exp(-((first - separation / 2) ** 2 + rest) / width**2)
        b = np.exp(-((first + separation / 2) ** 2 + rest) / width**2)
        return background + amplitude * (a + b)
    return f


PRESETS: dict[str, tuple[Callable, dict]] = {
    "constant": (_constant, {"rho": 0.5}),
    "bump": (_bump, {"background": 0.3, "amplitude": 0.5, "width": 1.0}),
    "step": (_step, {"low": 0.2, "high": 0.8, "half_width": 1.0, "edge": 0.25}),
    "two-bump": (_two_bump, {"background": 0.3, "amplitude": 0.5, "separation": 2.0, "width": 0.5}),
}


def make_profile(name: str, **params) -> Callable[[np.ndarray], np.ndarray]:
    """Profile function ``u0(x)`` for a named preset; unknown parameters are rejected."""
    if name not in PRESETS:
        raise KeyError(f"unknown profile preset {name!r}; choose from {sorted(PRESETS)}")
    factory, defaults = PRESETS[name]
    bad = set(params) - set(defaults)
    if bad:
        raise KeyError(f"preset {name!r} has no parameter(s) {sorted(bad)}")
    return factory(**{**defaults, **params})


def profile_reference_density(name: str, **params) -> float:
    """Far-field density of a preset, the natural reference rho for entropy."""
    defaults = PRESETS[name][1]
    p = {**defaults, **params}
    if name == "constant":
        return p["rho"]
    if name == "step":
        return p["low"]
    return p["background"]


def field_from_profile(u0: Callable, grid_size: int, side: float, dim: int = 1) -> DensityField:
    proto = DensityField(np.zeros((grid_size,) * dim), side)
    vals = np.asarray(u0(proto.points()), dtype=float).reshape((grid_size,) * dim)
    if np.any(vals < 0) or np.any(vals > 1):
        raise ValueError("profile values must lie in [0, 1]")
    return proto.replace(vals)


# ---------------------------------------------------------------------------
# Symbols
# ---------------------------------------------------------------------------

def wavenumbers(grid_size: int, side: float, dim: int) -> np.ndarray:
    """Angular wavevectors, shape ``(G,)*dim + (dim,)``."""
    k = 2 * np.pi * np.fft.fftfreq(grid_size, d=side / grid_size)
    if dim == 1:
        return k[:, None]
    return np.stack(np.meshgrid(k, k, indexing="ij"), axis=-1)


def continuum_symbol(grid_size: int, side: float, exponent: LevyExponent) -> np.ndarray:
    """``-psi(k)`` for every grid mode, psi by adaptive quadrature."""
    dim = exponent.dim
    k = wavenumbers(grid_size, side, dim)
    out = np.zeros((grid_size,) * dim)
    if dim == 1:
        mags = np.abs(k[:, 0])
        uniq, inv = np.unique(mags, return_inverse=True)
        vals = np.array([exponent.psi(float(m)) for m in uniq])
        return -vals[inv]
    # the box truncation keeps the eight symmetries of the square
    cache: dict[tuple[float, float], float] = {}
    for idx in np.ndindex(*out.shape):
        a, b = sorted((abs(k[idx][0]), abs(k[idx][1])))
        key = (round(a, 12), round(b, 12))
        if key not in cache:
            cache[key] = exponent.psi(np.array([a, b]))
        out[idx] = -cache[key]
    return out


def lattice_symbol(grid_size: int, side: float, kernel: JumpKernel, n: int) -> np.ndarray:
    """``-n^alpha sum_z p(z)(1 - cos(k.z/n))`` for every grid mode.

    The modes ``2 pi m / side`` turn ``k.z/n`` into a DFT phase on the
    ``n*side`` torus, so the sum is one FFT of the wrapped rate table.
    """
    m_sites = n * side
    if abs(m_sites - round(m_sites)) > 1e-9:
        raise ValueError("n * side must be an integer number of sites")
    m_sites = int(round(m_sites))
    if grid_size > m_sites:
        raise ValueError("grid finer than the lattice")
    dim = kernel.dim
    table = np.zeros((m_sites,) * dim)
    res = np.mod(kernel.offsets, m_sites)
    np.add.at(table, tuple(res.T), kernel.probs)
    spec = np.fft.fftn(table).real
    modes = np.fft.fftfreq(grid_size, d=1.0 / grid_size).astype(int) % m_sites
    sub = spec[np.ix_(*([modes] * dim))]
    return -(n**kernel.alpha) * (1.0 - sub)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def _clamp(values: np.ndarray) -> tuple[np.ndarray, float]:
    over = max(float(-values.min()), float(values.max() - 1.0), 0.0)
    if over > CLAMP_THRESHOLD:
        log.warning("clamped density overshoot of %.3g", over)
    return np.clip(values, 0.0, 1.0), over


def solve_spectral(u0: DensityField, t: float, symbol: np.ndarray, clamp: bool = True) -> DensityField:
    """Exact Fourier propagation ``u_hat(k) exp(t * symbol(k))``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if symbol.shape != u0.values.shape:
        raise ValueError("symbol and field shapes differ")
    vals = np.fft.ifftn(np.fft.fftn(u0.values) * np.exp(t * symbol)).real
    out = u0.replace(vals, time=u0.time + t)
    if clamp:
        out.values, out.max_clamp = _clamp(vals)
    return out


class FractionalHeatSolver:
    """Spectral solver with the symbol precomputed for one grid.

    Pass ``exponent`` for the continuum symbol or ``kernel`` and ``n`` for the
    lattice symbol at scale ``n``.
    """

    def __init__(self, grid_size: int, side: float, dim: int = 1, *,
                 exponent: LevyExponent | None = None, kernel: JumpKernel | None = None,
                 n: int | None = None):
        if exponent is not None:
            self.symbol = continuum_symbol(grid_size, side, exponent)
        elif kernel is not None and n is not None:
            self.symbol = lattice_symbol(grid_size, side, kernel, n)
        else:
            raise ValueError("need an exponent or a kernel with n")
        self.grid_size, self.side, self.dim = grid_size, side, dim

    def solve(self, u0: DensityField, t: float) -> DensityField:
        return solve_spectral(u0, t, self.symbol)

    def trajectory(self, u0: DensityField, horizon: float, dt: float = 0.01) -> "HydroTrajectory":
        steps = max(1, int(math.ceil(horizon / dt - 1e-9)))
        times = np.linspace(0.0, horizon, steps + 1)
        u_hat = np.fft.fftn(u0.values)
        frames = []
        worst = 0.0
        for t in times:
            vals, over = _clamp(np.fft.ifftn(u_hat * np.exp(t * self.symbol)).real)
            worst = max(worst, over)
            frames.append(vals)
        return HydroTrajectory(times, np.array(frames), u0.side, u0.origin, worst)


# -- quadrature form of the operator, used as an independent oracle ---------

@lru_cache(maxsize=32)
def _operator_multiplier(grid_size: int, side: float, alpha: float, p_star: float,
                         inner: float, panel: float, nodes: int) -> np.ndarray:
    k = np.abs(2 * np.pi * np.fft.fftfreq(grid_size, d=side / grid_size))
    outer = side / 2
    # [0, inner]: weight y^(1-alpha) absorbs the singularity of q(y) y^2
    x, w = roots_jacobi(24, 0.0, 1.0 - alpha)
    y = inner * (x + 1) / 2
    w = w * (inner / 2) ** (2.0 - alpha)
    ky = np.outer(k, y)
    smooth = -4.0 * np.sin(0.5 * ky) ** 2 / np.maximum(y, 1e-300) ** 2
    mult = p_star * (smooth @ w)
    # [inner, outer]: Gauss-Legendre panels
    edges = np.arange(inner, outer + panel * 0.5, panel)
    edges[-1] = outer
    gx, gw = roots_legendre(nodes)
    a, b = edges[:-1, None], edges[1:, None]
    yy = ((b - a) / 2 * gx + (a + b) / 2).ravel()
    ww = ((b - a) / 2 * gw).ravel() * p_star * yy ** (-(1.0 + alpha))
    ky = np.outer(k, yy)
    mult += (-4.0 * np.sin(0.5 * ky) ** 2) @ ww
    return mult


def apply_operator(field_: DensityField, exponent: LevyExponent, panel: float | None = None) -> DensityField:
    """``int q(y) {u(x+y) + u(x-y) - 2u(x)} dy`` over ``|y| <= side/2`` by fixed quadrature (d = 1).

    Shifts ``u(x +- y)`` are evaluated by trigonometric interpolation.  A mode
    ``cos(kx)`` is an eigenfunction with eigenvalue ``-2 psi(k)``; the density
    of the particle system evolves under half of this operator.
    """
    if field_.dim != 1:
        raise NotImplementedError("the quadrature operator is implemented for d = 1")
    if exponent.outer < field_.side / 2 - 1e-12 and not math.isinf(exponent.outer):
        raise ValueError("operator truncation is tied to the half period")
    g = field_.grid_size
    kmax = math.pi * g / field_.side
    if panel is None:
        panel = min(0.05, 2.0 / kmax)
    inner = min(panel, field_.side / 4)
    mult = _operator_multiplier(g, float(field_.side), exponent.alpha, exponent.p_star,
                                inner, panel, 10)
    vals = np.fft.ifft(np.fft.fft(field_.values) * (2.0 * mult)).real
    return field_.replace(vals)


def rk4_solve(u0: DensityField, t: float, exponent: LevyExponent, dt: float | None = None) -> DensityField:
    """Classical Runge-Kutta integration of ``du/dt = apply_operator(u) / 2``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    probe = apply_operator(u0, exponent)  # warms the multiplier cache
    g = u0.grid_size
    kmax = math.pi * g / u0.side
    rate = 2 * exponent.p_star * (kmax ** exponent.alpha) * 10.0 + 1.0
    if dt is None:
        dt = min(0.01, 0.5 / rate)
    steps = max(1, int(math.ceil(t / dt)))
    h = t / steps
    u = u0.values.copy()
    op = lambda v: 0.5 * apply_operator(probe.replace(v), exponent).values
    for _ in range(steps):
        k1 = op(u)
        k2 = op(u + 0.5 * h * k1)
        k3 = op(u + 0.5 * h * k2)
        k4 = op(u + h * k3)
        u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return u0.replace(u, time=u0.time + t)


# ---------------------------------------------------------------------------
# Lattice <-> continuum
# ---------------------------------------------------------------------------

def empirical_density(state: LatticeState, n: int, bin_width: float) -> DensityField:
    """Occupied-site histogram on macroscopic coordinates, normalised to a density.

    Bins tile ``[-side/(2n), side/(2n))`` in blocks of ``bin_width * n`` sites
    per axis, counted in the lab frame (site 0 is the origin).
    """
    per_bin = bin_width * n
    if per_bin < 1 or abs(per_bin - round(per_bin)) > 1e-9:
        raise ValueError("bin_width * n must be a positive integer")
    per_bin = int(round(per_bin))
    m = state.side
    if m % per_bin:
        raise ValueError("bins must tile the torus")
    dim = state.dim
    grid = state.occupancy.reshape((m,) * dim).astype(float)
    grid = np.roll(grid, m // 2, axis=tuple(range(dim)))
    nb = m // per_bin
    shape = sum(((nb, per_bin) for _ in range(dim)), ())
    blocks = grid.reshape(shape).mean(axis=tuple(range(1, 2 * dim, 2)))
    origin = (-(m // 2) + (per_bin - 1) / 2) / n
    return DensityField(blocks, m / n, origin=origin)


def coarsen(field_: DensityField, factor: int) -> DensityField:
    """Block-average a field by ``factor`` nodes per axis (matches ``empirical_density`` bins)."""
    g = field_.grid_size
    if g % factor:
        raise ValueError("factor must divide the grid size")
    dim = field_.dim
    shape = sum(((g // factor, factor) for _ in range(dim)), ())
    vals = field_.values.reshape(shape).mean(axis=tuple(range(1, 2 * dim, 2)))
    origin = field_.origin + (factor - 1) / 2 * field_.spacing
    return DensityField(vals, field_.side, field_.time, origin)


def shifted_density(field_: DensityField, x0) -> DensityField:
    """Periodic translate ``x -> u(x + x0)`` by a Fourier phase (exact for band-limited fields)."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size != field_.dim:
        raise ValueError("shift dimension mismatch")
    k = wavenumbers(field_.grid_size, field_.side, field_.dim)
    phase = np.exp(1j * (k @ x0))
    g = field_.grid_size
    if g % 2 == 0:
        # the Nyquist mode cannot carry a phase in a real signal
        nyq = np.abs(np.fft.fftfreq(g, d=1.0 / g)) == g // 2
        for a in range(field_.dim):
            sl = [slice(None)] * field_.dim
            sl[a] = nyq
            phase[tuple(sl)] = np.cos(np.angle(phase[tuple(sl)]))
    vals = np.fft.ifftn(np.fft.fftn(field_.values) * phase).real
    return field_.replace(vals)


def l1_distance(a: DensityField, b: DensityField) -> float:
    if a.values.shape != b.values.shape:
        raise ValueError("fields live on different grids")
    return float(np.abs(a.values - b.values).sum() * a.spacing**a.dim)


def l2_distance(a: DensityField, b: DensityField) -> float:
    return float(np.sqrt(((a.values - b.values) ** 2).sum() * a.spacing**a.dim))


# ---------------------------------------------------------------------------
# Time-dependent field for the limit sampler
# ---------------------------------------------------------------------------

@dataclass
class HydroTrajectory:
    """Snapshots ``u(t_k, .)`` with linear blending in time and periodic
    (bi)linear interpolation in space."""

    times: np.ndarray
    frames: np.ndarray  # (T,) + (G,)*dim
    side: float
    origin: float
    max_clamp: float = 0.0

    @classmethod
    def constant(cls, value: float, horizon: float, side: float = 8.0, dim: int = 1,
                 grid_size: int = 8) -> "HydroTrajectory":
        frames = np.full((2,) + (grid_size,) * dim, float(value))
        return cls(np.array([0.0, horizon]), frames, side, -side / 2)

    @property
    def dim(self) -> int:
        return self.frames.ndim - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def frame(self, s: float) -> np.ndarray:
        k, w = self._time_weights(s)
        if w == 0.0:
            return self.frames[k]
        return (1 - w) * self.frames[k] + w * self.frames[k + 1]

    def _time_weights(self, s: float):
        if s < self.times[0] - 1e-12 or s > self.times[-1] + 1e-12:
            raise ValueError(f"time {s} outside the stored trajectory")
        k = int(np.searchsorted(self.times, s, side="right") - 1)
        k = min(max(k, 0), self.times.size - 2) if self.times.size > 1 else 0
        if self.times.size == 1:
            return 0, 0.0
        w = (s - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, float(min(max(w, 0.0), 1.0))

    def value(self, s: float, x) -> np.ndarray | float:
        """u(s, x) for positions ``x`` (shape ``(..., dim)``, or scalar/1-d in d = 1)."""
        return interpolate_periodic(self.frame(s), self.side, self.origin, x)


def interpolate_periodic(values: np.ndarray, side: float, origin: float, x):
    dim = values.ndim
    g = values.shape[0]
    h = side / g
    x = np.asarray(x, dtype=float)
    if dim == 1:
        f = np.mod((x - origin) / h, g)
        i0 = np.floor(f).astype(np.int64)
        w = f - i0
        i0 %= g
        return (1 - w) * values[i0] + w * values[(i0 + 1) % g]
    f = np.mod((x - origin) / h, g)
    i0 = np.floor(f).astype(np.int64)
    w = f - i0
    i0 %= g
    i1 = (i0 + 1) % g
    a, b = i0[..., 0], i0[..., 1]
    c, d = i1[..., 0], i1[..., 1]
    wx, wy = w[..., 0], w[..., 1]
    return ((1 - wx) * (1 - wy) * values[a, b] + wx * (1 - wy) * values[c, b]
            + (1 - wx) * wy * values[a, d] + wx * wy * values[c, d])
