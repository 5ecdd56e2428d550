"""Exclusion process with long jumps on a periodic torus, with a tagged particle.

Sites are flat indices into ``side**dim`` (row-major); the tagged particle
starts at the origin, flat index 0.  Besides the wrapped site we keep its
unwrapped displacement so the scaled position is exact across windings.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _engine
from .kernel import JumpKernel, alias_draw


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass
class LatticeState:
    side: int
    dim: int
    occupancy: np.ndarray  # uint8, one entry per site
    particles: np.ndarray  # occupied sites, first ``count`` entries valid
    slot: np.ndarray  # site -> index into ``particles`` or -1
    count: int
    tagged_site: int = 0
    tagged_unwrapped: np.ndarray = field(default=None)
    time: float = 0.0

    def __post_init__(self):
        if self.tagged_unwrapped is None:
            self.tagged_unwrapped = np.zeros(self.dim, np.int64)

    @classmethod
    def from_occupancy(cls, occupancy: np.ndarray, side: int, dim: int) -> "LatticeState":
        occ = np.ascontiguousarray(occupancy, dtype=np.uint8).reshape(-1)
        if occ.size != side**dim:
            raise ValueError("occupancy size does not match side**dim")
        if occ[0] != 1:
            raise ValueError("the origin must be occupied by the tagged particle")
        sites = np.flatnonzero(occ).astype(np.int64)
        particles = np.full(occ.size, -1, np.int64)
        particles[: sites.size] = sites
        slot = np.full(occ.size, -1, np.int64)
        slot[sites] = np.arange(sites.size)
        return cls(side, dim, occ, particles, slot, int(sites.size))

    @property
    def n_sites(self) -> int:
        return self.side**self.dim

    def copy(self) -> "LatticeState":
        return LatticeState(
            self.side, self.dim, self.occupancy.copy(), self.particles.copy(),
            self.slot.copy(), self.count, self.tagged_site,
            self.tagged_unwrapped.copy(), self.time,
        )

    def coords(self, site: int) -> np.ndarray:
        return np.array(np.unravel_index(site, (self.side,) * self.dim), dtype=np.int64)

    def check(self) -> None:
        """Assert the bookkeeping invariants (debug helper)."""
        assert self.occupancy[self.tagged_site] == 1
        assert int(self.occupancy.sum()) == self.count
        live = self.particles[: self.count]
        assert np.all(self.occupancy[live] == 1)
        assert np.all(self.slot[live] == np.arange(self.count))
        expected = np.mod(self.tagged_unwrapped, self.side)
        assert np.array_equal(expected, self.coords(self.tagged_site))


def sample_equilibrium(side: int, dim: int, rho: float, rng: np.random.Generator) -> LatticeState:
    """Bernoulli(rho) product state conditioned on an occupied origin."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    occ = (rng.random(side**dim) < rho).astype(np.uint8)
    occ[0] = 1
    return LatticeState.from_occupancy(occ, side, dim)


def site_positions(side: int, dim: int, n: int) -> np.ndarray:
    """Macroscopic coordinates ``z/n`` of every site, ``z`` wrapped to [-side/2, side/2)."""
    axis = np.arange(side)
    axis = np.where(axis >= side - side // 2, axis - side, axis) / n
    if dim == 1:
        return axis[:, None]
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1)
    return grid.reshape(-1, dim)


def sample_profile(side: int, dim: int, n: int, u0: Callable[[np.ndarray], np.ndarray],
                   rng: np.random.Generator) -> LatticeState:
    """Independent Bernoulli(u0(z/n)) occupations, origin forced occupied.

    ``u0`` receives an array of shape ``(sites, dim)``.
    """
    x = site_positions(side, dim, n)
    dens = np.asarray(u0(x if dim > 1 else x[:, 0]), dtype=float).reshape(-1)
    if np.any(dens < 0.0) or np.any(dens > 1.0) or not np.all(np.isfinite(dens)):
        raise ValueError("profile values must lie in [0, 1]")
    occ = (rng.random(dens.size) < dens).astype(np.uint8)
    occ[0] = 1
    return LatticeState.from_occupancy(occ, side, dim)


@dataclass
class EnvironmentView:
    """Occupancy seen from the tagged particle: ``values[r] = eta(X + r)``.

    ``values`` is indexed by flat relative site; entry 0 is the tagged
    particle itself and is not part of the environment.
    """

    side: int
    dim: int
    values: np.ndarray

    @classmethod
    def from_state(cls, state: LatticeState) -> "EnvironmentView":
        shape = (state.side,) * state.dim
        grid = state.occupancy.reshape(shape)
        shift = tuple(-int(c) for c in state.coords(state.tagged_site))
        rel = np.roll(grid, shift, axis=tuple(range(state.dim))).reshape(-1)
        return cls(state.side, state.dim, rel)

    def __call__(self, z) -> int:
        z = np.atleast_1d(np.asarray(z, dtype=np.int64))
        if not np.any(np.mod(z, self.side)):
            raise ValueError("the origin is not part of the environment")
        idx = np.ravel_multi_index(tuple(np.mod(z, self.side)), (self.side,) * self.dim)
        return int(self.values[idx])

    def particle_count(self) -> int:
        return int(self.values.sum()) - 1


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class TaggedTrajectory:
    """Tagged jump log: microscopic times and lattice jump vectors."""

    times: np.ndarray
    jumps: np.ndarray
    horizon: float
    dim: int

    @classmethod
    def empty(cls, dim: int, horizon: float = 0.0) -> "TaggedTrajectory":
        return cls(np.zeros(0), np.zeros((0, dim), np.int64), horizon, dim)

    @property
    def counters(self) -> Counter:
        """``N^z``: number of tagged translations by each vector z."""
        return Counter(tuple(int(c) for c in z) for z in self.jumps)

    def displacement(self) -> np.ndarray:
        return self.jumps.sum(axis=0).astype(np.int64) if len(self.jumps) else np.zeros(self.dim, np.int64)

    def displacement_at(self, t: float) -> np.ndarray:
        k = np.searchsorted(self.times, t, side="right")
        return self.jumps[:k].sum(axis=0).astype(np.int64) if k else np.zeros(self.dim, np.int64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [f"dz_{a + 1}" for a in range(self.dim)])
            for t, z in zip(self.times, self.jumps):
                w.writerow([repr(float(t))] + [int(c) for c in z])

    @classmethod
    def from_csv(cls, path, horizon: float) -> "TaggedTrajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        dim = len(rows[0]) - 1
        body = rows[1:]
        times = np.array([float(r[0]) for r in body])
        jumps = np.array([[int(c) for c in r[1:]] for r in body], np.int64).reshape(-1, dim)
        return cls(times, jumps, horizon, dim)


def scaled_position(traj: TaggedTrajectory, n: int, t: float, alpha: float) -> np.ndarray:
    """``n^-1 X_{t n^alpha}``."""
    micro = t * n**alpha
    if micro > traj.horizon * (1 + 1e-12):
        raise ValueError(f"time {t} (microscopic {micro}) is beyond the horizon {traj.horizon}")
    return traj.displacement_at(micro) / n


@dataclass
class ScaledPath:
    """Piecewise-constant path on the macroscopic scale."""

    times: np.ndarray  # jump times
    jumps: np.ndarray  # jump vectors
    horizon: float

    def position(self, t: float) -> np.ndarray:
        k = np.searchsorted(self.times, t, side="right")
        return self.jumps[:k].sum(axis=0) if k else np.zeros(self.jumps.shape[1])


def jump_decomposition(traj: TaggedTrajectory, n: int, cutoff: float, alpha: float) -> tuple[ScaledPath, ScaledPath]:
    """Split the scaled path into jumps of size < cutoff and >= cutoff."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    scale = n**alpha
    t = traj.times / scale
    x = traj.jumps / n
    big = np.sqrt((x**2).sum(axis=1)) >= cutoff
    h = traj.horizon / scale
    return ScaledPath(t[~big], x[~big], h), ScaledPath(t[big], x[big], h)


# ---------------------------------------------------------------------------
# v_n and the exponential martingale
# ---------------------------------------------------------------------------

def _beta_matrix(betas, dim: int) -> np.ndarray:
    b = np.asarray(betas, dtype=float)
    if dim == 1:
        return b.reshape(-1, 1)
    return b.reshape(-1, dim)


def vn_coefficients(kernel: JumpKernel, side: int, betas, n: int) -> np.ndarray:
    """Per relative site r: ``sum_{z = r mod side} p(z) (1 - exp(i beta.z/n))``.

    Shape ``(side**dim, len(betas))``.  Several support vectors may wrap onto
    the same residue when the support reaches half the torus.
    """
    dim = kernel.dim
    b = _beta_matrix(betas, dim)
    phase = kernel.offsets @ b.T / n
    w = kernel.probs[:, None] * (2.0 * np.sin(0.5 * phase) ** 2 - 1j * np.sin(phase))
    res = np.mod(kernel.offsets, side)
    flat = np.ravel_multi_index(tuple(res.T), (side,) * dim)
    coef = np.zeros((side**dim, b.shape[0]), np.complex128)
    np.add.at(coef, flat, w)
    return coef


def v_n_value(view: EnvironmentView, kernel: JumpKernel, beta, n: int) -> complex | np.ndarray:
    """``v_n(xi) = n^alpha sum_z p(z) (1 - e^{i beta.z/n}) (1 - xi(z))``."""
    coef = vn_coefficients(kernel, view.side, beta, n)
    empty = 1.0 - view.values.astype(float)
    vals = n**kernel.alpha * (empty @ coef)
    b = np.asarray(beta, dtype=float)
    single = b.ndim == 0 or (kernel.dim > 1 and b.ndim == 1)
    return complex(vals[0]) if single else vals


def martingale_value(traj: TaggedTrajectory, integral, beta, n: int, t: float, alpha: float):
    """``exp{i beta.X_t^n + integral}`` where ``integral`` is
    ``int_0^{t n^alpha} sum_z p(z)(1 - e^{i beta z/n})(1 - xi_s(z)) ds``."""
    x = scaled_position(traj, n, t, alpha)
    b = np.atleast_1d(np.asarray(beta, dtype=float))
    return np.exp(1j * float(b @ x) + integral)


# ---------------------------------------------------------------------------
# Reference event loop
# ---------------------------------------------------------------------------

@dataclass
class StepEvent:
    t_before: float
    t_after: float
    source: int = -1
    target: int = -1
    jump: np.ndarray | None = None
    moved: bool = False
    tagged: bool = False
    horizon_hit: bool = False


def step(state: LatticeState, kernel: JumpKernel, rng: np.random.Generator,
         horizon: float = math.inf) -> StepEvent:
    """One ring of the global clock.

    If the next ring falls after ``horizon`` the clock is stopped at the
    horizon and nothing moves (memorylessness makes this exact).
    """
    if state.count < 1:
        raise ValueError("no particles on the lattice")
    t0 = state.time
    t1 = t0 + rng.standard_exponential() / state.count
    if t1 > horizon:
        state.time = horizon
        return StepEvent(t0, horizon, horizon_hit=True)
    state.time = t1
    j = min(int(rng.random() * state.count), state.count - 1)
    k = alias_draw(rng.random(), kernel.alias_prob, kernel.alias_index)
    z = kernel.offsets[k]
    s = int(state.particles[j])
    target = int(_engine.shifted_site(s, z, state.side, state.dim))
    ev = StepEvent(t0, t1, s, target, z.copy(), tagged=(s == state.tagged_site))
    if state.occupancy[target]:
        return ev
    state.occupancy[s] = 0
    state.occupancy[target] = 1
    state.particles[j] = target
    state.slot[target] = j
    state.slot[s] = -1
    if ev.tagged:
        state.tagged_site = target
        state.tagged_unwrapped += z
    ev.moved = True
    return ev


class Observer:
    """Hooks for ``run``; subclasses override what they need."""

    def on_start(self, state: LatticeState) -> None:
        pass

    def on_event(self, state: LatticeState, event: StepEvent) -> None:
        pass

    def result(self):
        return None


class MartingaleObserver(Observer):
    """Exact piecewise-constant integral of ``n^-alpha v_n(xi_s)`` for a beta grid."""

    def __init__(self, kernel: JumpKernel, side: int, betas, n: int):
        self.coef = vn_coefficients(kernel, side, betas, n)
        self.dim = kernel.dim
        self.side = side
        self.integral = np.zeros(self.coef.shape[1], np.complex128)
        self.v = np.zeros_like(self.integral)

    def _recompute(self, state):
        _engine.vn_sum(state.occupancy, state.tagged_site, self.coef, self.side, self.dim, self.v)

    def on_start(self, state):
        self._recompute(state)

    def on_event(self, state, event):
        self.integral += self.v * (event.t_after - event.t_before)
        if not event.moved:
            return
        if event.tagged:
            self._recompute(state)
        else:
            ra = _engine.relative_site(event.source, state.tagged_site, self.side, self.dim)
            rb = _engine.relative_site(event.target, state.tagged_site, self.side, self.dim)
            self.v += self.coef[ra] - self.coef[rb]

    def result(self):
        return self.integral.copy()


class SnapshotObserver(Observer):
    """Occupancy copies at prescribed microscopic times."""

    def __init__(self, times: Sequence[float]):
        self.times = np.sort(np.asarray(times, dtype=float))
        self.snapshots: list[np.ndarray] = []
        self._k = 0

    def _take(self, state, upto, inclusive=False):
        while self._k < self.times.size and (
            self.times[self._k] < upto or (inclusive and self.times[self._k] <= upto)
        ):
            self.snapshots.append(state.occupancy.copy())
            self._k += 1

    def on_event(self, state, event):
        # state already reflects the event; snapshots strictly before t_after
        # must see the pre-event configuration, reconstructed from the event.
        if self._k < self.times.size and self.times[self._k] < event.t_after:
            pre = state.occupancy.copy()
            if event.moved:
                pre[event.target] = 0
                pre[event.source] = 1
            while self._k < self.times.size and self.times[self._k] < event.t_after:
                self.snapshots.append(pre.copy())
                self._k += 1
        if event.horizon_hit:
            self._take(state, event.t_after, inclusive=True)

    def result(self):
        return np.array(self.snapshots)


def run(state: LatticeState, kernel: JumpKernel, horizon: float, rng: np.random.Generator,
        observers: Iterable[Observer] = ()) -> tuple[LatticeState, TaggedTrajectory, list]:
    """Reference loop: step until the horizon, streaming events to observers."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    observers = list(observers)
    for ob in observers:
        ob.on_start(state)
    times, jumps = [], []
    while True:
        ev = step(state, kernel, rng, horizon)
        for ob in observers:
            ob.on_event(state, ev)
        if ev.horizon_hit:
            break
        if ev.moved and ev.tagged:
            times.append(ev.t_after)
            jumps.append(ev.jump)
    traj = TaggedTrajectory(
        np.array(times), np.array(jumps, np.int64).reshape(-1, state.dim), horizon, state.dim
    )
    return state, traj, [ob.result() for ob in observers]


# ---------------------------------------------------------------------------
# Compiled replica runner
# ---------------------------------------------------------------------------

@dataclass
class ReplicaRecord:
    """Observables of one replica at the requested microscopic times."""

    obs_times: np.ndarray
    displacement: np.ndarray  # (n_obs, dim) integer
    integral: np.ndarray  # (n_obs, n_beta) complex
    occupancy: np.ndarray | None
    trajectory: TaggedTrajectory
    rings: int


def simulate(state: LatticeState, kernel: JumpKernel, horizon: float, rng: np.random.Generator,
             coef: np.ndarray | None = None, obs_times=None, record_occupancy: bool = False) -> ReplicaRecord:
    """Compiled equivalent of ``run`` with a martingale accumulator and snapshots.

    ``coef`` comes from ``vn_coefficients``; pass ``None`` to skip the
    functional.  Observation times default to ``[horizon]``.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if state.dim != kernel.dim:
        raise ValueError("state and kernel dimensions differ")
    obs = np.atleast_1d(np.asarray([horizon] if obs_times is None else obs_times, dtype=float))
    if np.any(np.diff(obs) < 0) or (obs.size and (obs[-1] > horizon or obs[0] < state.time)):
        raise ValueError("observation times must be sorted and within [time, horizon]")
    if coef is None:
        coef = np.zeros((state.n_sites, 0), np.complex128)
    meta = np.array([state.count, state.tagged_site], np.int64)
    clock = np.array([state.time])
    x_obs, i_obs, occ_obs, tt, tz, rings = _engine.simulate(
        state.occupancy, state.particles, state.slot, meta, state.tagged_unwrapped, clock,
        state.side, state.dim, kernel.offsets, kernel.alias_prob, kernel.alias_index,
        coef, obs, float(horizon), record_occupancy, rng,
    )
    state.tagged_site = int(meta[1])
    state.time = float(clock[0])
    traj = TaggedTrajectory(tt, tz, float(horizon), state.dim)
    return ReplicaRecord(obs, x_obs, i_obs, occ_obs if record_occupancy else None, traj, int(rings))


def snapshot_to_csv(state: LatticeState, path) -> None:
    """CSV of (site coordinates..., occupancy)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{a + 1}" for a in range(state.dim)] + ["occupancy"])
        for s in range(state.n_sites):
            w.writerow(list(state.coords(s)) + [int(state.occupancy[s])])


def snapshot_to_bytes(state: LatticeState) -> bytes:
    """Bit-packed occupancy, row-major."""
    return np.packbits(state.occupancy).tobytes()


def snapshot_from_bytes(data: bytes, side: int, dim: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, np.uint8))
    return bits[: side**dim].astype(np.uint8)
