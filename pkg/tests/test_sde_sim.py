import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from parabolic_mc.errors import ConfigurationError, NumericalBlowupError, UnsupportedVolatilityError
from parabolic_mc.rng_paths import TimeGrid, sample_bundle
from parabolic_mc.sde_sim import (DriftSpec, LampertiMap, VolSpec, euler_maruyama,
                                  lamperti_transform, log_lamperti)


def test_zero_drift_unit_vol_is_the_bundle():
    b = sample_bundle(3, 2, 40, TimeGrid(0.0, 0.01, 25), start=[0.2, -1.0])
    ens = euler_maruyama(DriftSpec.zero(2), VolSpec.unit(2), b)
    assert np.array_equal(ens.states, b.paths)


def test_start_row_and_euler_recursion():
    b = sample_bundle(5, 2, 30, TimeGrid(0.1, 0.02, 12), start=[1.0, 0.5])
    mu = DriftSpec.polynomial([[0.1, -0.5, 0.2], [0.0, 0.3, -0.1]])
    sigma = VolSpec.diagonal([0.7, 1.3], 2)
    ens = euler_maruyama(mu, sigma, b)
    x = ens.states
    assert np.all(x[:, 0] == [1.0, 0.5])
    for k in range(12):
        t = b.grid.time(k)
        expected = x[:, k] + mu(t, x[:, k]) * b.h + sigma(t, x[:, k]) * b.increments[:, k]
        assert np.array_equal(x[:, k + 1], expected)


@given(st.lists(st.integers(0, 49), min_size=1, max_size=20, unique=True))
def test_path_independence(keep):
    b = sample_bundle(8, 1, 50, TimeGrid(0.0, 0.05, 10), start=0.3)
    mu = DriftSpec.polynomial([[0.2, -1.0, 0.1]])
    full = euler_maruyama(mu, VolSpec.unit(1), b).states
    part = euler_maruyama(mu, VolSpec.unit(1), b.subset(keep)).states
    assert np.array_equal(part, full[keep])


def test_ou_mean():
    b = sample_bundle(21, 1, 100_000, TimeGrid(0.0, 0.001, 1000), start=1.0)
    xt = euler_maruyama(DriftSpec.linear(0.0, -1.0, 1), VolSpec.unit(1), b).terminal[:, 0]
    se = xt.std(ddof=1) / np.sqrt(xt.size)
    assert abs(xt.mean() - np.exp(-1.0)) < 3 * se


def test_gbm_direct_vs_lamperti():
    r, vol, s0, T, h = 0.05, 0.4, 1.0, 1.0, 0.0005
    b = sample_bundle(4, 1, 4000, TimeGrid.from_horizon(T, h), start=s0)
    direct = euler_maruyama(DriftSpec.linear(0.0, r, 1),
                            VolSpec.state_dependent(lambda t, s: vol * s, 1), b).terminal[:, 0]
    lmap = log_lamperti(vol, 1, drift_shift=(r - 0.5 * vol * vol) / vol)
    drift, unit, _ = lamperti_transform(VolSpec.state_dependent(lambda t, s: vol * s, 1),
                                        DriftSpec.linear(0.0, r, 1), lmap)
    b2 = sample_bundle(5, 1, 4000, TimeGrid.from_horizon(T, h), start=lmap.forward(0.0, s0))
    y = euler_maruyama(drift, unit, b2).terminal
    via = lmap.inverse(T, y)[:, 0]
    se = np.hypot(direct.std(ddof=1), via.std(ddof=1)) / np.sqrt(4000)
    assert abs(direct.mean() - via.mean()) < 3 * se


def test_black_scholes_lamperti_has_zero_drift_and_unit_vol():
    r, vol = 0.05, 0.4
    sigma = VolSpec.state_dependent(lambda t, s: vol * s, 2)
    lmap = log_lamperti(vol, 2, drift_shift=(r - 0.5 * vol * vol) / vol)
    drift, new_vol, _ = lamperti_transform(sigma, DriftSpec.linear(0.0, r, 2), lmap)
    assert new_vol.is_unit
    y = np.random.default_rng(0).normal(size=(50, 2))
    np.testing.assert_allclose(drift(0.3, y), 0.0, atol=1e-12)


def test_identity_scaling_lamperti():
    c = 2.0
    lmap = LampertiMap(forward=lambda t, x: x / c, inverse=lambda t, y: c * y,
                       d_x=lambda t, x: np.full(np.shape(x), 1 / c),
                       d_xx=lambda t, x: np.zeros(np.shape(x)))
    mu = DriftSpec.polynomial([[0.5, -1.0, 0.0]])
    drift, vol, _ = lamperti_transform(VolSpec.diagonal(c, 1), mu, lmap)
    assert vol.is_unit
    y = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(drift(0.0, y), mu(0.0, c * y) / c, rtol=1e-14)
    assert np.all(lmap.ito_correction(0.0, c * y, VolSpec.diagonal(c, 1)) == 0)


def test_ito_correction_matches_finite_difference_hessian():
    vol = 0.3
    lmap = log_lamperti(vol, 1)
    sigma = VolSpec.state_dependent(lambda t, s: vol * s, 1)
    xs = np.random.default_rng(3).uniform(0.2, 5.0, size=(20, 1))
    step = 1e-4 * xs
    f = lambda x: lmap.forward(0.0, x)
    hess = (f(xs + step) - 2 * f(xs) + f(xs - step)) / step ** 2
    fd = 0.5 * sigma(0.0, xs) ** 2 * hess
    np.testing.assert_allclose(lmap.ito_correction(0.0, xs, sigma), fd, rtol=1e-6)


def test_roundtrip_on_box():
    lmap = log_lamperti([0.2, 0.5], 2, drift_shift=0.1)
    xs = np.random.default_rng(1).uniform(0.01, 50, size=(100, 2))
    back = lmap.inverse(0.7, lmap.forward(0.7, xs))
    assert np.max(np.abs(back - xs) / xs) < 1e-12


def test_non_invertible_map_rejected():
    lmap = LampertiMap(forward=lambda t, x: x * x, inverse=lambda t, y: np.sqrt(y),
                       d_x=lambda t, x: 2 * x, d_xx=lambda t, x: np.full(np.shape(x), 2.0),
                       box=(-1.0, 1.0))
    with pytest.raises(UnsupportedVolatilityError):
        lamperti_transform(VolSpec.state_dependent(lambda t, x: 1 / (2 * x), 1),
                           DriftSpec.zero(1), lmap)


def test_blowup_names_path_and_step():
    b = sample_bundle(1, 1, 8, TimeGrid(0.0, 0.1, 50), start=10.0)
    with pytest.raises(NumericalBlowupError) as info:
        euler_maruyama(DriftSpec.polynomial([[0.0, 0.0, 5.0]]), VolSpec.unit(1), b)
    assert info.value.path is not None and info.value.step >= 1
    assert f"step {info.value.step}" in str(info.value)


def test_dimension_mismatch_rejected():
    b = sample_bundle(1, 2, 4, TimeGrid(0.0, 0.1, 2))
    with pytest.raises(ConfigurationError):
        euler_maruyama(DriftSpec.zero(3), VolSpec.unit(2), b)


def test_time_dependent_vol_uses_left_endpoint():
    b = sample_bundle(2, 1, 5, TimeGrid(0.0, 0.25, 4))
    sigma = VolSpec.time_dependent(lambda t: 1.0 + t, 1)
    x = euler_maruyama(DriftSpec.zero(1), sigma, b).states
    scale = 1.0 + b.grid.times[:4]
    np.testing.assert_allclose(np.diff(x[:, :, 0], axis=1), b.increments[:, :, 0] * scale,
                               atol=1e-15)


def test_polynomial_divergence():
    mu = DriftSpec.polynomial([[0.1, 2.0, 0.5], [0.0, -1.0, 1.5]])
    x = np.array([[1.0, 2.0]])
    assert mu.divergence(0.0, x)[0] == pytest.approx(2.0 + 1.0 - 1.0 + 6.0)
