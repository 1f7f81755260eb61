import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from parabolic_mc.errors import ConfigurationError, UsageError
from parabolic_mc.girsanov_fk import feynman_kac_direct
from parabolic_mc.pde_zoo import (OracleCache, SemilinearPhi, analytic_solution, bs_rainbow, bsb,
                                  fp_ou, gaussian_density, hjb, make_canonical,
                                  make_random_linear_drift, make_random_semilinear_phi,
                                  normalized_error, semi_analytic)
from parabolic_mc.rng_paths import TimeGrid, sample_bundle
from parabolic_mc.sde_sim import DriftSpec


# --- random families --------------------------------------------------------------------

@given(st.integers(0, 2**32), st.integers(1, 6))
def test_random_drift_coefficients_in_unit_interval(seed, dim):
    mu = make_random_linear_drift(seed, dim)
    assert mu.coeffs.shape == (dim, 3)
    assert np.all(mu.coeffs >= 0.0) and np.all(mu.coeffs < 1.0)


def test_polynomial_drift_hand_value():
    mu = DriftSpec.polynomial([[0.2, 0.3, 0.1]])
    assert mu(0.0, np.array([2.0]))[0] == pytest.approx(1.2, abs=1e-15)


def test_random_drift_deterministic():
    a, b = make_random_linear_drift(5, 3), make_random_linear_drift(5, 3)
    assert np.array_equal(a.coeffs, b.coeffs)
    assert not np.array_equal(a.coeffs, make_random_linear_drift(6, 3).coeffs)


def test_semilinear_basis_values():
    x = np.array([np.pi / 2, np.pi / 2])
    zeros = np.zeros(2)
    assert SemilinearPhi((1.0, 0.0, 0.0))(0.0, x, 0.0, zeros) == pytest.approx(2.0)
    assert SemilinearPhi((0.0, 1.0, 0.0))(0.0, zeros, 0.0, np.array([1.0, -1.0])) == 2.0
    assert SemilinearPhi((0.0, 0.0, 1.0))(0.0, zeros, 0.0, zeros) == 1.0


@given(st.integers(0, 2**32))
def test_semilinear_coefficients_uniform(seed):
    phi = make_random_semilinear_phi(seed, 3)
    assert len(phi.coeffs) == 3 and all(0.0 <= c < 1.0 for c in phi.coeffs)
    assert phi == make_random_semilinear_phi(seed, 3)


# --- analytic solutions -----------------------------------------------------------------

def test_fp_ou_point_value():
    expected = 1.0 / np.sqrt(2 * np.pi * (1.5 * np.e - 0.5))
    assert analytic_solution(fp_ou(1), 0.5, 0.0) == pytest.approx(expected, rel=1e-14)
    assert analytic_solution(fp_ou(1), 0.5, 0.0) == pytest.approx(0.21092, abs=5e-6)


def test_fp_ou_integrates_to_one():
    pde = fp_ou(1)
    grid = np.linspace(-10, 10, 4001)
    vals = [analytic_solution(pde, 0.5, x) for x in grid]
    assert abs(np.trapezoid(vals, grid) - 1.0) < 1e-4


def test_fp_ou_matches_direct_solve_on_grid():
    pde = fp_ou(1)
    bundle = sample_bundle(11, 1, 100_000, TimeGrid.from_horizon(0.5, 0.001))
    for x in np.linspace(-1.0, 1.0, 5):
        est = feynman_kac_direct(pde.problem, 0.5, x, bundle)
        assert abs(est.value - analytic_solution(pde, 0.5, x)) < 3 * est.std_error


def test_fp_ou_initial_condition():
    x = np.array([0.3, -0.2])
    assert analytic_solution(fp_ou(2), 0.0, x) == pytest.approx(float(gaussian_density(x)))


def test_bsb_terminal_condition_exact():
    x = np.array([0.7, 1.3, 0.9])
    assert analytic_solution(bsb(3), 1.0, x) == float(np.sum(x * x))


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_bsb_monotone_in_time_to_maturity(t1, t2):
    pde = bsb(2)
    x = np.array([0.8, 1.1])
    lo, hi = sorted((t1, t2))
    assert analytic_solution(pde, lo, x) >= analytic_solution(pde, hi, x)


def test_hjb_terminal_value():
    assert analytic_solution(hjb(2), 1.0, np.zeros(2)) == pytest.approx(np.log(0.5), abs=1e-15)
    assert analytic_solution(hjb(2), 1.0, np.zeros(2)) == pytest.approx(-0.69315, abs=5e-6)


def test_hjb_oracle_one_dimensional_quadrature():
    # 1d reference by Gauss-Hermite quadrature of E exp(-g(x + sqrt(2 tau) Z))
    x, tau = 0.4, 1.0
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    vals = np.exp(-np.log(0.5 * (1 + (x + np.sqrt(2 * tau) * nodes) ** 2)))
    truth = -np.log(np.sum(weights * vals) / np.sqrt(2 * np.pi))
    value, se = semi_analytic(hjb(1), 0.0, x, n_samples=200_000)
    assert abs(value - truth) < 3 * se


def test_bs_rainbow_one_asset_is_black_scholes():
    from scipy.stats import norm
    r, vol, strike, t, s = 0.05, 0.4, 1.0, 0.5, 1.1
    d1 = (np.log(s / strike) + (r + 0.5 * vol ** 2) * t) / (vol * np.sqrt(t))
    call = s * norm.cdf(d1) - strike * np.exp(-r * t) * norm.cdf(d1 - vol * np.sqrt(t))
    value, se = semi_analytic(bs_rainbow(1), t, s, n_samples=400_000)
    assert abs(value - call) < 3 * se


def test_semi_analytic_oracles_repeatable(tmp_path):
    pde = hjb(2)
    a = semi_analytic(pde, 0.5, [0.1, 0.2], n_samples=20_000)
    b = semi_analytic(pde, 0.5, [0.1, 0.2], n_samples=20_000)
    assert a == b
    cache = OracleCache(tmp_path)
    first = cache.get(pde, 0.5, [0.1, 0.2], n_samples=20_000)
    second = cache.get(pde, 0.5, [0.1, 0.2], n_samples=20_000)
    assert first == second == a
    assert len(list(tmp_path.glob("*.csv"))) == 1
    assert OracleCache(tmp_path).load(pde)  # persisted rows survive a fresh cache object


def test_out_of_box_raises():
    with pytest.raises(UsageError):
        analytic_solution(hjb(1), 1.5, 0.0)
    with pytest.raises(UsageError):
        analytic_solution(bsb(1), 0.5, -1.0)
    with pytest.raises(UsageError):
        analytic_solution(fp_ou(1), 0.5, 100.0)


def test_unknown_canonical_name():
    with pytest.raises(ConfigurationError):
        make_canonical("heat", 1)
    assert make_canonical("FP_OU", 2).dim == 2


# --- normalized error -------------------------------------------------------------------

def test_normalized_error_examples():
    assert normalized_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert normalized_error([1.1, 0.9], [1.0, 1.0]) == pytest.approx(0.1)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8).flatmap(
    lambda t: st.tuples(st.just(t), st.lists(st.floats(-10, 10), min_size=len(t), max_size=len(t)))),
    st.floats(0.1, 100.0))
def test_normalized_error_scale_invariant(pair, scale):
    truths, ests = pair
    if np.sum(np.abs(truths)) < 1e-3:
        return
    base = normalized_error(ests, truths)
    scaled = normalized_error(np.multiply(ests, scale), np.multiply(truths, scale))
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-12)


def test_normalized_error_rejects_zero_truths_and_length_mismatch():
    with pytest.raises(ConfigurationError):
        normalized_error([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(UsageError):
        normalized_error([1.0], [1.0, 2.0])
