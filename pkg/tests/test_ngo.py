import time

import numpy as np
import pytest

from parabolic_mc.errors import ConfigurationError, UsageError
from parabolic_mc.girsanov_fk import PdeProblem, feynman_kac_direct
from parabolic_mc.ngo import (NgoModel, TrainConfig, _task_batch, build_ngo, ngo_ratio,
                              solve_linear_ngo, solve_linear_ngo_batch, solve_semilinear_ngo,
                              train_ngo)
from parabolic_mc.pde_zoo import (analytic_solution, bs_rainbow, bsb, fp_ou, gaussian_density,
                                  hjb, make_random_linear_drift, semi_analytic)
from parabolic_mc.rng_paths import TimeGrid, draw_count, reset_draw_count, sample_bundle
from parabolic_mc.sde_sim import DriftSpec, VolSpec


def _linear(drift, dim=1):
    return PdeProblem("linear", dim, drift, VolSpec.unit(dim), p0=gaussian_density)


def _random_inputs(seed, n, steps, dim, scale=5.0):
    rng = np.random.default_rng(seed)
    return (scale * rng.standard_normal((n, steps, dim)),
            scale * rng.standard_normal((n, steps, dim)))


# --- structure ----------------------------------------------------------------------------

def test_untrained_ratio_is_exactly_one():
    model = build_ngo(2, width=8, n_hidden=1)
    mu, dw = _random_inputs(0, 50, 4, 2)
    assert np.array_equal(ngo_ratio(model, mu, dw, 0.01), np.ones(50))


def test_ratio_positive_on_random_inputs_untrained_and_perturbed():
    model = build_ngo(1, width=8, n_hidden=2, seed=3)
    mu, dw = _random_inputs(1, 100_000, 2, 1)
    assert np.all(ngo_ratio(model, mu, dw, 0.05) > 0)
    rng = np.random.default_rng(2)
    model.expmart.set_flat_params(10.0 * rng.standard_normal(model.expmart.n_params))
    ratio = ngo_ratio(model, mu, dw, 0.05)
    assert np.all(ratio > 0) and np.all(np.isfinite(ratio))


def test_ratio_positive_for_trained_model(constant_ngo):
    mu, dw = _random_inputs(4, 100_000, 2, 1)
    assert np.all(ngo_ratio(constant_ngo.model, mu, dw, 0.05) > 0)


def test_shape_mismatch_raises():
    model = build_ngo(2, width=8, n_hidden=1)
    with pytest.raises(UsageError):
        ngo_ratio(model, np.zeros((3, 4, 2)), np.zeros((3, 5, 2)), 0.01)
    with pytest.raises(UsageError):
        ngo_ratio(model, np.zeros((3, 4, 3)), np.zeros((3, 4, 3)), 0.01)
    bundle = sample_bundle(0, 1, 10, TimeGrid.from_horizon(0.1, 0.05))
    with pytest.raises(UsageError):
        solve_linear_ngo(model, _linear(DriftSpec.zero(1)), 0.1, 0.0, bundle)


def test_missing_grad_net_raises():
    model = build_ngo(2, width=8, n_hidden=1)
    bundle = sample_bundle(0, 2, 10, TimeGrid.from_horizon(1.0, 0.1))
    with pytest.raises(ConfigurationError):
        solve_semilinear_ngo(model, hjb(2).problem, 0.0, np.zeros(2), bundle)


def test_semilinear_at_terminal_time_returns_terminal_condition():
    model = build_ngo(2, width=8, n_hidden=1, semilinear=True, grad_width=8, grad_hidden=1)
    bundle = sample_bundle(0, 2, 10, TimeGrid.from_horizon(1.0, 0.1))
    x = np.array([0.3, -0.4])
    est = solve_semilinear_ngo(model, hjb(2).problem, 1.0, x, bundle)
    assert est.value == pytest.approx(np.log(0.5 * (1 + 0.25)), abs=1e-15)
    assert est.std_error == 0.0


def test_checkpoint_round_trip(tmp_path):
    model = build_ngo(1, width=8, n_hidden=1, semilinear=True, grad_width=8, grad_hidden=1, seed=5)
    rng = np.random.default_rng(0)
    model.expmart.set_flat_params(rng.standard_normal(model.expmart.n_params))
    model.save(tmp_path / "m.json")
    back = NgoModel.load(tmp_path / "m.json")
    mu, dw = _random_inputs(6, 20, 3, 1, scale=1.0)
    assert np.array_equal(ngo_ratio(back, mu, dw, 0.01), ngo_ratio(model, mu, dw, 0.01))
    assert back.grad_net is not None


def test_training_is_deterministic():
    cfg = TrainConfig(dim=1, family="polynomial", n_paths=32, samples_per_epoch=40,
                      tasks_per_iteration=4, t_range=(0.0, 0.1), h=0.02, width=8, n_hidden=1,
                      seed=4)
    a = train_ngo(cfg, bundle_seed=1)
    b = train_ngo(cfg, bundle_seed=1)
    assert a[1] == b[1] and len(a[1]) == 10
    assert np.array_equal(a[0].expmart.flat_params(), b[0].expmart.flat_params())


def test_lr_schedule_steps_down_at_milestones():
    cfg = TrainConfig(lr=1e-2, lr_milestones=(10, 20), lr_decay=0.5)
    assert [cfg.lr_at(i) for i in (0, 9, 10, 25)] == [1e-2, 1e-2, 5e-3, 2.5e-3]
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_decay=0.0)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(n_paths=1)
    with pytest.raises(ConfigurationError):
        TrainConfig(x_box=(1.0, 0.0))
    with pytest.raises(ConfigurationError):
        TrainConfig(loss="huber")
    with pytest.raises(ConfigurationError):
        TrainConfig(x_sampling="grid")


def test_diagonal_sampling_repeats_one_coordinate():
    cfg = TrainConfig(dim=4, family="linear", x_box=(-1.0, 1.0), x_sampling="diagonal")
    _, drifts, xs = _task_batch(cfg, np.random.default_rng(0))
    assert len(drifts) == cfg.tasks_per_iteration
    assert np.all(xs == xs[:, :1]) and np.all(np.abs(xs) <= 1.0)


# --- bundle reuse -----------------------------------------------------------------------

def test_sixteen_solves_consume_one_bundle_of_draws(linear_ngo_1d):
    grid = TimeGrid.from_horizon(0.5, linear_ngo_1d.h)
    reset_draw_count()
    bundle = sample_bundle(21, 1, 2000, grid)
    problems = [_linear(make_random_linear_drift(s, 1)) for s in range(16)]
    out = solve_linear_ngo_batch(linear_ngo_1d.model, problems, 0.5, 0.2, bundle)
    assert len(out) == 16 and all(e.method == "ngo" for e in out)
    assert draw_count() == 2000 * grid.n_steps


def test_inference_time_flat_in_number_of_problems(linear_ngo_1d):
    # amortization target: 16 problems on a shared bundle cost at most 3x one problem
    bundle = sample_bundle(22, 1, 4000, TimeGrid.from_horizon(0.5, linear_ngo_1d.h))
    problems = [_linear(make_random_linear_drift(s, 1)) for s in range(16)]

    def best(k):
        times = []
        for _ in range(3):
            start = time.perf_counter()
            solve_linear_ngo_batch(linear_ngo_1d.model, problems[:k], 0.5, 0.2, bundle)
            times.append(time.perf_counter() - start)
        return min(times)

    assert best(16) <= 3.0 * best(1)


# --- constant-drift family: path-wise behaviour -------------------------------------------

def _held_out_paths(h, T=0.5, n=1000):
    return sample_bundle(77, 1, n, TimeGrid.from_horizon(T, h)).increments


def test_zero_drift_ratio_close_to_one(constant_ngo):
    inc = _held_out_paths(constant_ngo.h)
    ratio = ngo_ratio(constant_ngo.model, np.zeros_like(inc), inc, constant_ngo.h)
    assert abs(np.mean(ratio) - 1.0) <= 0.05
    assert np.median(np.abs(ratio - 1.0)) <= 0.05


def test_constant_drift_ratio_matches_exponential_martingale(constant_ngo):
    T, c = 0.5, 0.3
    inc = _held_out_paths(constant_ngo.h, T)
    ratio = ngo_ratio(constant_ngo.model, np.full_like(inc, c), inc, constant_ngo.h)
    exact = np.exp(c * inc.sum(axis=(1, 2)) - 0.5 * c * c * T)
    assert np.mean(np.abs(ratio / exact - 1.0) < 0.10) >= 0.90


# --- linear problems ----------------------------------------------------------------------

def test_zero_drift_solve_matches_direct(linear_ngo_1d):
    bundle = sample_bundle(31, 1, 20_000, TimeGrid.from_horizon(0.5, linear_ngo_1d.h))
    problem = _linear(DriftSpec.zero(1))
    ngo = solve_linear_ngo(linear_ngo_1d.model, problem, 0.5, 0.3, bundle).value
    direct = feynman_kac_direct(problem, 0.5, 0.3, bundle).value
    assert abs(ngo - direct) <= 0.05 * direct


def test_fp_ou_one_dimensional_value(linear_ngo_1d):
    bundle = sample_bundle(32, 1, 20_000, TimeGrid.from_horizon(0.5, linear_ngo_1d.h))
    est = solve_linear_ngo(linear_ngo_1d.model, fp_ou(1).problem, 0.5, 0.0, bundle)
    assert abs(est.value - 0.21092) <= 0.05 * 0.21092


def test_bs_rainbow_ten_dimensional_value(linear_ngo_10d):
    pde = bs_rainbow(10)
    x = np.ones(10)
    truth, se = semi_analytic(pde, 0.5, x, n_samples=1_000_000)
    assert se < 0.01 * truth
    bundle = sample_bundle(33, 10, 20_000, TimeGrid.from_horizon(0.5, linear_ngo_10d.h))
    est = solve_linear_ngo(linear_ngo_10d.model, pde.problem, 0.5, x, bundle)
    assert abs(est.value - truth) <= 0.10 * truth


# --- semilinear problems ------------------------------------------------------------------

def test_hjb_ten_dimensional_value(hjb_ngo_10d):
    truth, se = semi_analytic(hjb(10), 0.0, np.zeros(10))
    bundle = sample_bundle(34, 10, 20_000, TimeGrid.from_horizon(1.0, hjb_ngo_10d.h))
    est = solve_semilinear_ngo(hjb_ngo_10d.model, hjb(10).problem, 0.0, np.zeros(10), bundle)
    assert abs(est.value - truth) <= 0.10 * abs(truth)


def test_bsb_two_dimensional_value(bsb_ngo_2d):
    truth = np.exp(0.21) * 1.25
    x = np.array([1.0, 0.5])
    assert analytic_solution(bsb(2), 0.0, x) == pytest.approx(truth, rel=1e-12)
    bundle = sample_bundle(35, 2, 20_000, TimeGrid.from_horizon(1.0, bsb_ngo_2d.h))
    est = solve_semilinear_ngo(bsb_ngo_2d.model, bsb(2).problem, 0.0, x, bundle)
    assert abs(est.value - truth) <= 0.10 * truth


# --- training on the polynomial family ----------------------------------------------------

def test_polynomial_loss_history_decreases(polynomial_ngo):
    hist = polynomial_ngo.history
    assert np.mean(hist[-100:]) <= 0.5 * np.mean(hist[:100])


def test_polynomial_held_out_error(polynomial_ngo):
    assert polynomial_ngo.held_out_error <= 0.10
    assert polynomial_ngo.held_out_error < 0.5 * polynomial_ngo.untrained_error
    assert polynomial_ngo.model.card["held_out_normalized_error"] == polynomial_ngo.held_out_error
