import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrsep import hydro as H
from lrsep.kernel import LevyExponent, build_kernel
from lrsep.lattice import LatticeState, sample_equilibrium

L, G = 8.0, 512


def exponent(alpha, side=L):
    k = build_kernel(alpha, 1, 256)
    return LevyExponent(alpha, 1, k.p_star, outer=side / 2)


def bump_field():
    return H.field_from_profile(H.make_profile("bump"), G, L)


def rel_l2(a, b):
    return H.l2_distance(a, b) / math.sqrt((b.values**2).sum() * b.spacing)


def test_constant_field_is_fixed():
    ex = exponent(1.0)
    f = H.field_from_profile(H.make_profile("constant", rho=0.3), G, L)
    assert np.allclose(H.apply_operator(f, ex).values, 0.0, atol=1e-12)
    sym = H.continuum_symbol(G, L, ex)
    assert np.allclose(H.solve_spectral(f, 2.0, sym).values, 0.3, atol=1e-14)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("mode", [1, 3, 17])
def test_cosine_eigenfunction(alpha, mode):
    ex = exponent(alpha)
    f = bump_field()
    k = 2 * math.pi * mode / L
    f = f.replace(np.cos(k * f.axis()))
    lf = H.apply_operator(f, ex)
    assert np.allclose(lf.values, -2 * ex.psi(k) * f.values, atol=1e-9 * (1 + ex.psi(k)))


def test_operator_mean_zero():
    lf = H.apply_operator(bump_field(), exponent(1.5))
    assert abs(lf.values.mean()) < 1e-12


def test_semigroup():
    sym = H.continuum_symbol(G, L, exponent(1.0))
    u0 = bump_field()
    a = H.solve_spectral(H.solve_spectral(u0, 0.3, sym, clamp=False), 0.45, sym, clamp=False)
    b = H.solve_spectral(u0, 0.75, sym, clamp=False)
    assert np.max(np.abs(a.values - b.values)) < 1e-10


def test_rejects_negative_time():
    sym = H.continuum_symbol(G, L, exponent(1.0))
    with pytest.raises(ValueError):
        H.solve_spectral(bump_field(), -0.1, sym)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("t", [0.25, 1.0])
def test_spectral_matches_runge_kutta(alpha, t):
    ex = exponent(alpha)
    u0 = bump_field()
    spec = H.FractionalHeatSolver(G, L, exponent=ex).solve(u0, t)
    rk = H.rk4_solve(u0, t, ex)
    assert rel_l2(spec, rk) < 1e-3


SUITE = [("constant", {}), ("bump", {}), ("step", {}), ("two-bump", {}),
         ("step", {"low": 0.0, "high": 1.0, "edge": 0.1})]


@pytest.mark.parametrize("name,params", SUITE)
@pytest.mark.parametrize("alpha", [0.5, 1.5])
def test_maximum_principle_and_mass(name, params, alpha):
    ex = exponent(alpha)
    u0 = H.field_from_profile(H.make_profile(name, **params), G, L)
    sym = H.continuum_symbol(G, L, ex)
    for t in (0.1, 0.5, 1.0):
        raw = H.solve_spectral(u0, t, sym, clamp=False)
        assert raw.values.min() >= -1e-9 and raw.values.max() <= 1 + 1e-9
        assert abs(raw.mass() - u0.mass()) <= 1e-9 * u0.mass()


def test_clamp_is_reported():
    f = H.DensityField(np.r_[np.ones(8), np.zeros(8)], 2.0)
    sym = -np.abs(2 * np.pi * np.fft.fftfreq(16, d=2.0 / 16)) ** 3  # sharp, rings
    out = H.solve_spectral(f, 1e-4, sym)
    assert out.values.min() >= 0 and out.values.max() <= 1
    assert out.max_clamp >= 0


def test_lattice_symbol_converges_to_continuum():
    u0 = bump_field()
    t = 0.5
    gaps = {}
    for n in (64, 128):
        side = int(L * n)
        k = build_kernel(1.0, 1, side // 2)
        ex = LevyExponent(1.0, 1, k.p_star, outer=L / 2)
        cont = H.FractionalHeatSolver(G, L, exponent=ex).solve(u0, t)
        lat = H.FractionalHeatSolver(G, L, kernel=k, n=n).solve(u0, t)
        gaps[n] = H.l2_distance(lat, cont)
    assert gaps[128] < 2 * gaps[64]
    assert gaps[128] < gaps[64]


def test_lattice_symbol_matches_direct_sum():
    from lrsep.kernel import discrete_symbol
    n = 8
    k = build_kernel(0.7, 1, 32)
    sym = H.lattice_symbol(16, 8.0, k, n)
    modes = 2 * np.pi * np.fft.fftfreq(16, d=0.5)
    direct = -np.array([discrete_symbol(k, m, n) for m in modes])
    assert np.allclose(sym, direct, atol=1e-12)


def test_empirical_density_cases():
    n = 64
    empty = LatticeState.from_occupancy(np.r_[1, np.zeros(511)].astype(np.uint8), 512, 1)
    e = H.empirical_density(empty, n, 0.25)
    assert e.values.sum() == pytest.approx(1 / 16)  # only the tagged particle
    full = sample_equilibrium(512, 1, 1.0, np.random.default_rng(0))
    assert np.all(H.empirical_density(full, n, 0.25).values == 1.0)
    st_ = sample_equilibrium(512, 1, 0.5, np.random.default_rng(1))
    e = H.empirical_density(st_, n, 0.25)
    sigma = math.sqrt(0.25 / 16)
    assert e.values.shape == (32,)
    assert np.sum(np.abs(e.values - 0.5) > 3 * sigma) <= 1
    with pytest.raises(ValueError):
        H.empirical_density(st_, n, 0.001)


def test_empirical_bins_line_up_with_coarsened_grid():
    st_ = sample_equilibrium(512, 1, 0.5, np.random.default_rng(2))
    e = H.empirical_density(st_, 64, 0.5)
    u = H.coarsen(H.DensityField(np.zeros(512), 8.0), 32)
    assert np.allclose(e.axis(), u.axis())


def test_shift_identities():
    f = bump_field()
    assert np.allclose(H.shifted_density(f, 0.0).values, f.values, atol=1e-14)
    assert np.allclose(H.shifted_density(f, L).values, f.values, atol=1e-12)
    a = H.shifted_density(H.shifted_density(f, 0.3), 0.45)
    b = H.shifted_density(f, 0.75)
    assert np.allclose(a.values, b.values, atol=1e-12)
    # u(x + x0): the bump centre moves to -x0
    s = H.shifted_density(f, 1.0)
    assert s.axis()[np.argmax(s.values)] == pytest.approx(-1.0, abs=f.spacing)


@settings(max_examples=10, deadline=None)
@given(x0=st.floats(-20, 20))
def test_shift_preserves_mass(x0):
    f = bump_field()
    assert H.shifted_density(f, x0).mass() == pytest.approx(f.mass(), rel=1e-12)


def test_field_io(tmp_path):
    f = bump_field().replace(bump_field().values, time=0.25)
    back = H.DensityField.from_bytes(f.to_bytes())
    assert np.array_equal(back.values, f.values) and back.time == 0.25 and back.origin == f.origin
    small = H.coarsen(f, 16)
    small.to_csv(tmp_path / "f.csv")
    again = H.DensityField.from_csv(tmp_path / "f.csv")
    assert np.allclose(again.values, small.values) and again.side == pytest.approx(small.side)


def test_presets_validate():
    with pytest.raises(KeyError):
        H.make_profile("triangle")
    with pytest.raises(KeyError):
        H.make_profile("bump", height=2)
    with pytest.raises(ValueError):
        H.field_from_profile(H.make_profile("bump", amplitude=0.9), 64, 8.0)
    assert H.profile_reference_density("bump") == 0.3


def test_trajectory_interpolation():
    ex = exponent(0.5)
    u0 = bump_field()
    solver = H.FractionalHeatSolver(G, L, exponent=ex)
    traj = solver.trajectory(u0, 0.5, 0.01)
    assert traj.times.size == 51 and traj.horizon == pytest.approx(0.5)
    exact = solver.solve(u0, 0.255)
    x = np.array([-0.37, 0.0, 1.111])
    got = traj.value(0.255, x)
    want = H.interpolate_periodic(exact.values, L, exact.origin, x)
    assert np.allclose(got, want, atol=2e-4)
    assert traj.value(0.0, 0.0) == pytest.approx(0.8, abs=1e-3)
    with pytest.raises(ValueError):
        traj.value(0.6, 0.0)


def test_bilinear_interpolation_2d():
    v = np.arange(16.0).reshape(4, 4)
    assert H.interpolate_periodic(v, 4.0, 0.0, np.array([1.0, 2.0])) == pytest.approx(v[1, 2])
    assert H.interpolate_periodic(v, 4.0, 0.0, np.array([1.5, 2.0])) == pytest.approx(0.5 * (v[1, 2] + v[2, 2]))


def test_two_dimensional_solver_conserves_mass():
    k = build_kernel(1.0, 2, 16)
    g = 16
    u0 = H.field_from_profile(H.make_profile("bump"), g, 4.0, dim=2)
    sym = H.lattice_symbol(g, 4.0, k, 8)
    out = H.solve_spectral(u0, 0.3, sym)
    assert out.mass() == pytest.approx(u0.mass(), rel=1e-9)
    assert out.values.max() < u0.values.max()
