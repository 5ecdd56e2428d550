import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm, null_space

from lrsep.kernel import build_kernel, discrete_symbol
from lrsep.lattice import (EnvironmentView, LatticeState, MartingaleObserver, SnapshotObserver,
                           TaggedTrajectory, jump_decomposition, martingale_value, run,
                           sample_equilibrium, sample_profile, scaled_position, simulate,
                           snapshot_from_bytes, snapshot_to_bytes, snapshot_to_csv, step,
                           v_n_value, vn_coefficients)


def lone_particle(side, dim=1):
    occ = np.zeros(side**dim, np.uint8)
    occ[0] = 1
    return LatticeState.from_occupancy(occ, side, dim)


# -- initial states ---------------------------------------------------------

def test_equilibrium_extremes():
    rng = np.random.default_rng(0)
    empty = sample_equilibrium(64, 1, 0.0, rng)
    assert empty.count == 1 and empty.occupancy[0] == 1
    full = sample_equilibrium(16, 2, 1.0, rng)
    assert full.count == 256
    with pytest.raises(ValueError):
        sample_equilibrium(8, 1, 1.5, rng)


def test_equilibrium_site_means():
    rng = np.random.default_rng(1)
    occ = np.array([sample_equilibrium(256, 1, 0.5, rng).occupancy[1:] for _ in range(10**4)], float)
    sigma = math.sqrt(0.25 / occ.shape[0])
    assert occ.mean() == pytest.approx(0.5, abs=3 * sigma / math.sqrt(255))
    # per-site: at most a handful of 3-sigma excursions out of 255
    assert (np.abs(occ.mean(axis=0) - 0.5) > 3 * sigma).sum() <= 5


def test_profile_constant_matches_equilibrium_law():
    a = sample_profile(128, 1, 16, lambda x: np.full_like(x, 0.4), np.random.default_rng(5))
    b = sample_equilibrium(128, 1, 0.4, np.random.default_rng(5))
    assert np.array_equal(a.occupancy, b.occupancy)


def test_profile_indicator_is_degenerate():
    n, side = 8, 64
    st_ = sample_profile(side, 1, n, lambda x: (np.abs(x) <= 1).astype(float), np.random.default_rng(0))
    z = np.arange(side)
    z = np.where(z >= side // 2, z - side, z)
    assert np.array_equal(st_.occupancy, (np.abs(z) <= n).astype(np.uint8))


def test_profile_bump_statistics():
    n, side = 16, 128
    u0 = lambda x: 0.8 * np.exp(-x**2)
    rng = np.random.default_rng(2)
    acc = np.mean([sample_profile(side, 1, n, u0, rng).occupancy for _ in range(1000)], axis=0)
    z = np.arange(side)
    x = np.where(z >= side // 2, z - side, z) / n
    expect = u0(x)
    expect[0] = 1.0
    bins = 16
    emp = acc.reshape(bins, -1).mean(axis=1)
    ref = expect.reshape(bins, -1).mean(axis=1)
    assert np.abs(emp - ref).sum() * (side / n / bins) < 0.02


def test_profile_rejects_bad_values():
    with pytest.raises(ValueError):
        sample_profile(32, 1, 4, lambda x: 1.5 + 0 * x, np.random.default_rng(0))


# -- dynamics -----------------------------------------------------------------

def test_lone_particle_always_moves():
    k = build_kernel(1.0, 1, 5)
    st_ = lone_particle(32)
    rng = np.random.default_rng(0)
    for _ in range(200):
        ev = step(st_, k, rng)
        assert ev.moved and ev.tagged
    st_.check()


def test_full_lattice_frozen():
    k = build_kernel(0.5, 2, 3)
    st_ = sample_equilibrium(8, 2, 1.0, np.random.default_rng(0))
    before = st_.occupancy.copy()
    rng = np.random.default_rng(1)
    for _ in range(500):
        assert not step(st_, k, rng).moved
    assert np.array_equal(before, st_.occupancy)


def test_two_site_chain_against_matrix_exponential():
    # one particle on a 2-site ring, R = 1: both jumps lead to the other site
    k = build_kernel(1.0, 1, 1)
    q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    t = 0.7
    p_home = expm(q * t)[0, 0]
    rng = np.random.default_rng(3)
    reps = 20_000
    home, flips = 0, []
    for _ in range(reps):
        st_ = lone_particle(2)
        _, traj, _ = run(st_, k, t, rng)
        home += st_.tagged_site == 0
        flips.append(len(traj.times))
    se = math.sqrt(p_home * (1 - p_home) / reps)
    assert abs(home / reps - p_home) <= 3 * se
    assert abs(np.mean(flips) - t) <= 3 * math.sqrt(t / reps)


def four_site_generator(kernel, k_particles):
    side = 4
    configs = [c for c in itertools.product([0, 1], repeat=side) if sum(c) == k_particles]
    index = {c: i for i, c in enumerate(configs)}
    q = np.zeros((len(configs), len(configs)))
    for c in configs:
        for x in range(side):
            if not c[x]:
                continue
            for z, p in kernel.rate_table.items():
                y = (x + z[0]) % side
                if c[y]:
                    continue
                d = list(c)
                d[x], d[y] = 0, 1
                q[index[c], index[tuple(d)]] += p
    np.fill_diagonal(q, -q.sum(axis=1))
    return configs, q


def test_four_site_detailed_balance_and_occupation():
    kernel = build_kernel(1.0, 1, 2)
    configs, q = four_site_generator(kernel, 2)
    pi = null_space(q.T)[:, 0]
    pi = pi / pi.sum()
    # product Bernoulli measure restricted to two particles is uniform
    assert np.allclose(pi, 1 / len(configs), atol=1e-12)
    flux = pi[:, None] * q
    assert np.allclose(flux, flux.T, atol=1e-12)
    # long-run occupation of the simulated chain
    occ = np.array([1, 1, 0, 0], np.uint8)
    st_ = LatticeState.from_occupancy(occ, 4, 1)
    rng = np.random.default_rng(9)
    time_in = np.zeros(len(configs))
    index = {c: i for i, c in enumerate(configs)}
    horizon = 20_000.0
    while st_.time < horizon:
        cur = index[tuple(int(v) for v in st_.occupancy)]
        ev = step(st_, kernel, rng, horizon)
        time_in[cur] += ev.t_after - ev.t_before
    freq = time_in / time_in.sum()
    assert np.allclose(freq, pi, atol=0.01)


def test_run_zero_horizon():
    k = build_kernel(0.5, 1, 16)
    st_ = sample_equilibrium(64, 1, 0.5, np.random.default_rng(0))
    before = st_.copy()
    _, traj, _ = run(st_, k, 0.0, np.random.default_rng(1))
    assert traj.times.size == 0
    assert np.array_equal(before.occupancy, st_.occupancy) and st_.time == 0.0


def test_identity_and_conservation_long_run():
    k = build_kernel(0.8, 1, 256)
    st_ = sample_equilibrium(512, 1, 0.4, np.random.default_rng(2))
    count = st_.count
    rec = simulate(st_, k, 10**6 / count, np.random.default_rng(3))
    assert rec.rings > 900_000
    st_.check()
    assert st_.count == count == int(st_.occupancy.sum())
    traj = rec.trajectory
    total = sum(np.array(z) * c for z, c in traj.counters.items())
    assert np.array_equal(total, st_.tagged_unwrapped)
    assert np.array_equal(traj.displacement(), st_.tagged_unwrapped)


def test_engine_matches_reference_loop():
    k = build_kernel(1.2, 1, 32)
    betas = [0.5, 1.0, 2.0]
    n = 8
    base = sample_equilibrium(64, 1, 0.5, np.random.default_rng(5))
    a, b = base.copy(), base.copy()
    horizon = 40.0
    mo = MartingaleObserver(k, 64, betas, n)
    so = SnapshotObserver([10.0, 25.0])
    _, traj, (integral, snaps) = run(a, k, horizon, np.random.default_rng(6), [mo, so])
    rec = simulate(b, k, horizon, np.random.default_rng(6), coef=vn_coefficients(k, 64, betas, n),
                   obs_times=[10.0, 25.0, horizon], record_occupancy=True)
    assert np.array_equal(a.occupancy, b.occupancy)
    assert np.array_equal(traj.times, rec.trajectory.times)
    assert np.array_equal(traj.jumps, rec.trajectory.jumps)
    assert np.allclose(integral, rec.integral[-1], atol=1e-12)
    assert np.array_equal(snaps, rec.occupancy[:2])


def test_engine_two_dimensional_bookkeeping():
    k = build_kernel(1.0, 2, 8)
    st_ = sample_equilibrium(16, 2, 0.3, np.random.default_rng(1))
    rec = simulate(st_, k, 50.0, np.random.default_rng(2))
    st_.check()
    assert np.array_equal(rec.trajectory.displacement(), st_.tagged_unwrapped)


def test_unwrapped_survives_winding():
    k = build_kernel(1.0, 1, 1)
    st_ = lone_particle(4)
    rec = simulate(st_, k, 500.0, np.random.default_rng(0))
    st_.check()
    assert np.abs(st_.tagged_unwrapped[0]) > 4  # wound around the ring
    assert st_.tagged_unwrapped[0] % 4 == st_.tagged_site


# -- scaled observables -----------------------------------------------------

def test_scaled_position_cases():
    traj = TaggedTrajectory(np.array([4.0]), np.array([[3]]), 10.0, 1)
    n, alpha = 4, 1.0
    assert scaled_position(traj, n, 0.0, alpha)[0] == 0.0
    assert scaled_position(traj, n, 0.99, alpha)[0] == 0.0
    assert scaled_position(traj, n, 1.0, alpha)[0] == 0.75
    assert scaled_position(traj, n, 2.0, alpha)[0] == 0.75
    with pytest.raises(ValueError):
        scaled_position(traj, n, 3.0, alpha)


def test_jump_decomposition():
    traj = TaggedTrajectory(np.array([1.0, 2.0, 3.0]), np.array([[1], [-10], [2]]), 5.0, 1)
    small, large = jump_decomposition(traj, 10, 100.0, 1.0)
    assert large.times.size == 0
    small, large = jump_decomposition(traj, 10, 1e-9, 1.0)
    assert small.times.size == 0
    small, large = jump_decomposition(traj, 10, 0.5, 1.0)
    for t in (0.05, 0.15, 0.25, 0.35, 0.5):
        assert small.position(t)[0] + large.position(t)[0] == pytest.approx(
            traj.displacement_at(t * 10) [0] / 10)
    with pytest.raises(ValueError):
        jump_decomposition(traj, 10, 0.0, 1.0)


def test_v_n_full_and_empty_environment():
    k = build_kernel(0.5, 1, 128)
    n = 16
    full = EnvironmentView(256, 1, np.ones(256, np.uint8))
    assert v_n_value(full, k, 1.0, n) == 0
    empty = np.zeros(256, np.uint8)
    empty[0] = 1
    v = v_n_value(EnvironmentView(256, 1, empty), k, 1.0, n)
    assert v.real == pytest.approx(discrete_symbol(k, 1.0, n), rel=1e-12)
    assert abs(v.imag) < 1e-12  # odd part cancels on a symmetric support


def test_v_n_mean_under_product_measure():
    k = build_kernel(0.5, 1, 128)
    n, rho = 16, 0.5
    rng = np.random.default_rng(4)
    coef = vn_coefficients(k, 256, [1.0], n)[:, 0] * n**0.5
    occ = (rng.random((10**4, 256)) < rho).astype(float)
    occ[:, 0] = 1
    vals = (1 - occ) @ coef
    target = (1 - rho) * discrete_symbol(k, 1.0, n)
    assert abs(vals.real.mean() - target) <= 3 * vals.real.std() / 100
    assert abs(vals.imag.mean()) <= 3 * vals.imag.std() / 100 + 1e-12


def test_martingale_trivial_cases():
    traj = TaggedTrajectory.empty(1, 10.0)
    assert martingale_value(traj, 0.0, 1.0, 16, 0.0, 0.5) == 1
    k = build_kernel(0.5, 1, 32)
    st_ = sample_equilibrium(64, 1, 1.0, np.random.default_rng(0))
    rec = simulate(st_, k, 20.0, np.random.default_rng(1), coef=vn_coefficients(k, 64, [1.0], 8))
    m = martingale_value(rec.trajectory, rec.integral[-1, 0], 1.0, 8, 20.0 / 8**0.5, 0.5)
    assert m == 1


def test_martingale_mean_small_run():
    k = build_kernel(0.5, 1, 128)
    n, side = 16, 256
    coef = vn_coefficients(k, side, [1.0], n)
    micro = 0.5 * n**0.5
    vals = []
    for s in range(2000):
        rng = np.random.default_rng(1000 + s)
        st_ = sample_equilibrium(side, 1, 0.5, rng)
        rec = simulate(st_, k, micro, rng, coef=coef)
        vals.append(martingale_value(rec.trajectory, rec.integral[-1, 0], 1.0, n, 0.5, 0.5))
    vals = np.array(vals)
    se = np.array([vals.real.std(), vals.imag.std()]) / math.sqrt(vals.size)
    assert abs(vals.real.mean() - 1) <= 3 * se[0]
    assert abs(vals.imag.mean()) <= 3 * se[1]


# -- environment and persistence ------------------------------------------------

def test_environment_view_relabels():
    st_ = sample_equilibrium(16, 2, 0.5, np.random.default_rng(3))
    k = build_kernel(1.0, 2, 4)
    simulate(st_, k, 5.0, np.random.default_rng(4))
    view = EnvironmentView.from_state(st_)
    assert view.particle_count() == st_.count - 1
    x = st_.coords(st_.tagged_site)
    for z in ([1, 0], [0, -3], [5, 7]):
        site = np.ravel_multi_index(tuple(np.mod(x + z, 16)), (16, 16))
        assert view(z) == st_.occupancy[site]
    with pytest.raises(ValueError):
        view([0, 0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), side=st.sampled_from([8, 13, 32]))
def test_snapshot_roundtrip(seed, side):
    st_ = sample_equilibrium(side, 1, 0.5, np.random.default_rng(seed))
    assert np.array_equal(snapshot_from_bytes(snapshot_to_bytes(st_), side, 1), st_.occupancy)


def test_csv_exports(tmp_path):
    st_ = sample_equilibrium(8, 1, 0.5, np.random.default_rng(0))
    snapshot_to_csv(st_, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0] == "x_1,occupancy" and len(rows) == 9
    traj = TaggedTrajectory(np.array([0.5, 1.25]), np.array([[2], [-1]]), 3.0, 1)
    traj.to_csv(tmp_path / "t.csv")
    back = TaggedTrajectory.from_csv(tmp_path / "t.csv", 3.0)
    assert np.array_equal(back.times, traj.times) and np.array_equal(back.jumps, traj.jumps)


def test_simulate_validates_observation_times():
    k = build_kernel(1.0, 1, 4)
    st_ = lone_particle(16)
    with pytest.raises(ValueError):
        simulate(st_, k, 1.0, np.random.default_rng(0), obs_times=[2.0])
    with pytest.raises(ValueError):
        simulate(st_, k, -1.0, np.random.default_rng(0))
