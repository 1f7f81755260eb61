import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parabolic_mc.elbo_meta import (DriftModel, MetaConfig, PriorModel, _rademacher,
                                    baseline_policy_objective, divergence, elbo_direct, elbo_is,
                                    gaussian_tasks, meta_train)
from parabolic_mc.errors import ConfigurationError
from parabolic_mc.neural import autodiff as ad
from parabolic_mc.rng_paths import TimeGrid, draw_count, reset_draw_count, sample_bundle
from parabolic_mc.sde_sim import DriftSpec

LOG_2PI = np.log(2 * np.pi)


class LinearMap:
    """mu(x) = A x with an explicit forward-mode product."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.params = []

    def __call__(self, t, x):
        return ad.as_tensor(x) @ ad.Tensor(self.matrix.T)

    def jvp(self, x, tangents):
        return self(0.0, x), ad.as_tensor(tangents) @ ad.Tensor(self.matrix.T)


# --- divergence ----------------------------------------------------------------------------

@given(st.integers(1, 6), st.integers(0, 1000))
def test_linear_map_divergence_is_trace(dim, seed):
    matrix = np.random.default_rng(seed).normal(size=(dim, dim))
    x = np.random.default_rng(seed + 1).normal(size=(4, dim))
    div = divergence(LinearMap(matrix), 0.0, x, "exact")
    np.testing.assert_allclose(np.asarray(div.value), np.trace(matrix), rtol=1e-12, atol=1e-12)


def test_identity_divergence_is_dimension():
    for dim in (1, 3, 7):
        div = divergence(LinearMap(np.eye(dim)), 0.0, np.ones((2, dim)), "exact")
        np.testing.assert_array_equal(div.value, dim)
        spec = DriftSpec.linear(0.0, 1.0, dim)
        np.testing.assert_array_equal(divergence(spec, 0.0, np.ones((2, dim))), dim)


def test_linear_model_divergence_is_slope_sum():
    mu = DriftModel(3, "linear", seed=4)
    div = divergence(mu, 0.0, np.zeros((5, 3)), "exact")
    np.testing.assert_allclose(div.value, mu.slope.value.sum(), rtol=1e-14)


def _jacobians(mu, x):
    d = x.shape[1]
    _, jv = mu.jvp(x, np.broadcast_to(np.eye(d)[:, None, :], (d, x.shape[0], d)))
    return np.transpose(jv.value, (1, 2, 0))      # (n, out, in)


def test_hutchinson_within_three_se_of_exact():
    mu = DriftModel(5, "mlp", width=16, seed=3)
    x = np.random.default_rng(0).normal(size=(3, 5))
    n_probes, seed = 10_000, 11
    exact = divergence(mu, 0.0, x, "exact").value
    hutch = divergence(mu, 0.0, x, "hutchinson", n_probes=n_probes, seed=seed).value
    jac = _jacobians(mu, x)
    eps = _rademacher((n_probes, 3, 5), seed)
    per_probe = np.einsum("pni,nij,pnj->pn", eps, jac, eps)
    np.testing.assert_allclose(per_probe.mean(axis=0), hutch, rtol=1e-10)
    se = per_probe.std(axis=0, ddof=1) / np.sqrt(n_probes)
    assert np.all(np.abs(hutch - exact) < 3 * se)


def test_hutchinson_error_shrinks_like_inverse_root_probes():
    mu = DriftModel(5, "mlp", width=16, seed=3)
    x = np.random.default_rng(1).normal(size=(400, 5))
    exact = divergence(mu, 0.0, x, "exact").value
    rms = [np.sqrt(np.mean((divergence(mu, 0.0, x, "hutchinson", n_probes=n, seed=5).value
                            - exact) ** 2)) for n in (16, 64)]
    assert 1.4 <= rms[0] / rms[1] <= 2.9


# --- estimators ----------------------------------------------------------------------------

def test_elbo_direct_zero_drift_closed_form():
    bundle = sample_bundle(21, 1, 20_000, TimeGrid(0.0, 0.01, 10))
    est = elbo_direct(DriftModel(1, "constant", scale=0.0), PriorModel.standard(1),
                      np.zeros((1, 1)), bundle, with_grad=False)
    assert abs(est.value - (-0.5 * LOG_2PI - 0.05)) < 3 * est.std_error
    assert est.breakdown["divergence"] == 0.0


def test_elbo_is_zero_drift_is_mean_log_prior():
    bundle = sample_bundle(22, 2, 500, TimeGrid(0.0, 0.02, 5))
    data = np.array([[0.3, -0.2], [1.0, 0.5]])
    prior = PriorModel(2, mean=[0.1, 0.0], log_std=[0.2, -0.1])
    est = elbo_is(DriftModel(2, "constant", scale=0.0), prior, data, bundle, with_grad=False)
    ends = data[:, None, :] + bundle.increments.sum(axis=1)[None]
    expected = np.mean(prior.log_density(ends.reshape(-1, 2)).value)
    assert est.value == pytest.approx(expected, abs=1e-12)
    assert est.breakdown["stochastic"] == 0.0 and est.breakdown["quadratic"] == 0.0


def test_elbo_value_is_sum_of_terms():
    bundle = sample_bundle(23, 2, 200, TimeGrid(0.0, 0.02, 5))
    est = elbo_is(DriftModel(2, seed=1, scale=0.3), PriorModel(2), np.ones((3, 2)), bundle)
    assert est.value == pytest.approx(sum(est.breakdown.values()), abs=1e-12)
    assert set(est.breakdown) == {"stochastic", "quadratic", "divergence", "prior"}
    assert est.bits_per_dim(2) == pytest.approx(-est.value / (2 * np.log(2)))


def test_elbo_is_constant_drift_closed_form():
    c, x, T = 0.7, 0.4, 0.5
    bundle = sample_bundle(24, 1, 50_000, TimeGrid.from_horizon(T, 0.05))
    mu = DriftModel(1, "constant")
    mu.offset.value = np.array([c])
    est = elbo_is(mu, PriorModel.standard(1), np.array([[x]]), bundle, with_grad=False)
    truth = -0.5 * c * c * T - 0.5 * LOG_2PI - 0.5 * (x * x + T)
    assert abs(est.value - truth) < 3 * est.std_error


def test_direct_and_importance_estimators_agree_for_small_drift():
    mu = DriftModel(2, seed=5, width=16, scale=0.1)
    prior = PriorModel.standard(2)
    data = np.array([[0.5, -0.5], [1.0, 0.2]])
    bundle = sample_bundle(25, 2, 4000, TimeGrid(0.0, 0.01, 10))
    a = elbo_direct(mu, prior, data, bundle, with_grad=False)
    b = elbo_is(mu, prior, data, bundle, with_grad=False)
    assert abs(a.value - b.value) < 3 * np.hypot(a.std_error, b.std_error)


def test_elbo_is_gradient_matches_finite_differences():
    mu = DriftModel(2, seed=6, width=8, scale=0.5)
    prior = PriorModel(2, mean=[0.2, -0.1], log_std=[0.1, 0.0])
    data = np.array([[0.3, 0.8], [-0.4, 0.1]])
    bundle = sample_bundle(26, 2, 50, TimeGrid(0.0, 0.05, 4))
    est = elbo_is(mu, prior, data, bundle)
    grads = np.concatenate([est.gradients[p.name].ravel() for p in mu.params])
    flat = mu.net.flat_params()
    rng = np.random.default_rng(0)
    for i in rng.choice(flat.size, 8, replace=False):
        step = 1e-5
        vals = []
        for sign in (1, -1):
            moved = flat.copy()
            moved[i] += sign * step
            mu.net.set_flat_params(moved)
            vals.append(elbo_is(mu, prior, data, bundle, with_grad=False).value)
        mu.net.set_flat_params(flat)
        fd = (vals[0] - vals[1]) / (2 * step)
        assert fd == pytest.approx(grads[i], rel=1e-4, abs=1e-9)
    fd_mean = []
    for sign in (1, -1):
        moved = PriorModel(2, mean=[0.2 + sign * 1e-6, -0.1], log_std=[0.1, 0.0])
        fd_mean.append(elbo_is(mu, moved, data, bundle, with_grad=False).value)
    assert (fd_mean[0] - fd_mean[1]) / 2e-6 == pytest.approx(est.gradients["prior.mean"][0],
                                                              rel=1e-4)


@settings(max_examples=10)
@given(st.floats(-0.8, 0.8), st.floats(-1.0, 0.5), st.floats(-1.5, 1.5))
def test_elbo_is_is_a_lower_bound(offset, slope, x):
    T = 0.5
    mu = DriftModel(1, "linear")
    mu.offset.value = np.array([offset])
    mu.slope.value = np.array([slope])
    bundle = sample_bundle(27, 1, 4000, TimeGrid.from_horizon(T, 0.01))
    est = elbo_is(mu, PriorModel.standard(1), np.array([[x]]), bundle, with_grad=False)
    grow = np.exp(slope * T)
    mean_T = x * grow + (offset * (grow - 1) / slope if slope != 0 else offset * T)
    var_T = (grow * grow - 1) / (2 * slope) if slope != 0 else T
    log_p = slope * T - 0.5 * LOG_2PI - 0.5 * np.log(1 + var_T) - 0.5 * mean_T ** 2 / (1 + var_T)
    assert est.value <= log_p + 3 * est.std_error


def test_singular_base_volatility_rejected():
    bundle = sample_bundle(28, 2, 10, TimeGrid(0.0, 0.1, 2))
    with pytest.raises(ConfigurationError):
        elbo_is(DriftModel(2), PriorModel(2), np.zeros((1, 2)), bundle, sigma=[1.0, 0.0])


def test_elbo_is_draws_nothing_beyond_its_bundle():
    bundle = sample_bundle(29, 2, 100, TimeGrid(0.0, 0.1, 3))
    reset_draw_count()
    elbo_is(DriftModel(2, seed=1), PriorModel(2), np.ones((4, 2)), bundle)
    assert draw_count() == 0


# --- meta-learning -------------------------------------------------------------------------

def _small_cfg(**kw):
    base = dict(lr=0.02, epochs=15, n_paths=16, n_steps=5, T=0.1, seed=3)
    base.update(kw)
    return MetaConfig(**base)


def test_meta_train_path_reuse_draw_count():
    tasks, _ = gaussian_tasks(3, 20, seed=0)
    cfg = _small_cfg(epochs=4)
    drifts = [DriftModel(2, width=8, seed=i, scale=0.1) for i in range(3)]
    reset_draw_count()
    meta_train(tasks, PriorModel(2), drifts, cfg)
    assert draw_count() == cfg.epochs * cfg.n_paths * cfg.n_steps * 2


def test_meta_train_deterministic():
    tasks, _ = gaussian_tasks(2, 20, seed=1)
    runs = [meta_train(tasks, PriorModel(2), [DriftModel(2, width=8, seed=i, scale=0.1)
                                              for i in range(2)], _small_cfg(epochs=5))
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].curves, runs[1].curves)
    np.testing.assert_array_equal(runs[0].prior.mean.value, runs[1].prior.mean.value)


def test_single_task_from_prior_learns_ou_drift():
    # With a fixed N(0, I) prior a zero drift is not optimal: the bound is
    # maximised per dimension by mu = a (x - m1) with
    # a = T / (T var(data) + sum_k h t_k), i.e. close to the identity map.
    data = np.random.default_rng(2).standard_normal((400, 2))
    cfg = MetaConfig(lr=0.01, epochs=300, n_paths=64, n_steps=5, T=0.1, seed=3)
    mu = DriftModel(2, "linear", scale=0.0)
    res = meta_train([data], PriorModel.standard(2), [mu], cfg)
    h = cfg.T / cfg.n_steps
    m1, m2 = data.mean(axis=0), (data ** 2).mean(axis=0)
    slope = cfg.T / (cfg.T * (m2 - m1 ** 2) + cfg.T * (cfg.T - h) / 2)
    np.testing.assert_allclose(mu.slope.value, slope, atol=0.05)
    np.testing.assert_allclose(mu.offset.value, -slope * m1, atol=0.1)
    assert res.curves[-20:].mean() > res.curves[:5].mean()


def test_meta_prior_centres_on_symmetric_tasks():
    tasks, means = gaussian_tasks(10, 60, seed=0)
    assert np.allclose(means.mean(axis=0), 0.0, atol=1e-12)
    drifts = [DriftModel(2, width=16, seed=i, scale=0.1) for i in range(10)]
    res = meta_train(tasks, PriorModel(2), drifts, MetaConfig(lr=0.01, epochs=40, n_paths=16,
                                                              n_steps=10, T=0.1))
    assert np.linalg.norm(res.prior.mean.value) < 0.3
    assert np.all(res.prior.log_std.value > 0.0)   # widened to cover the ring of tasks


def test_meta_train_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        meta_train([], PriorModel(2), [], _small_cfg())
    with pytest.raises(ConfigurationError):
        meta_train([np.zeros((3, 2))], PriorModel(2), [], _small_cfg())
    with pytest.raises(ConfigurationError):
        meta_train([np.zeros((0, 2))], PriorModel(2), [DriftModel(2)], _small_cfg())


# --- baseline objective --------------------------------------------------------------------

def test_matched_scenario_gives_plain_expectation():
    pi = DriftModel(1, "constant")
    pi.offset.value = np.array([0.4])
    bundle = sample_bundle(30, 1, 2000, TimeGrid(0.0, 0.05, 10))
    value, _ = baseline_policy_objective(pi, [DriftSpec.constant(0.4, 1)], lambda s: s[:, 0] ** 2,
                                         0.2, bundle, with_grad=False)
    ends = 0.2 + 0.4 * 0.5 + bundle.increments.sum(axis=1)[:, 0]
    assert value == pytest.approx(np.mean(ends ** 2), rel=1e-12)


def test_reweighted_mean_moves_to_scenario_drift():
    p, m, x0 = 0.2, -0.5, 0.3
    bundle = sample_bundle(31, 1, 100_000, TimeGrid(0.0, 0.05, 20))
    T = bundle.grid.T
    pi = DriftModel(1, "constant")
    pi.offset.value = np.array([p])
    value, _ = baseline_policy_objective(pi, [DriftSpec.constant(m, 1)], lambda s: s[:, 0], x0,
                                         bundle, with_grad=False)
    w_T = bundle.increments.sum(axis=1)[:, 0]
    per_path = (x0 + p * T + w_T) * np.exp((m - p) * w_T - 0.5 * (m - p) ** 2 * T)
    assert value == pytest.approx(per_path.mean(), rel=1e-10)
    se = per_path.std(ddof=1) / np.sqrt(per_path.size)
    assert abs(value - (x0 + m * T)) < 3 * se


def test_baseline_objective_gradient_matches_finite_differences():
    pi = DriftModel(1, width=8, seed=7, scale=0.5)
    scenarios = [DriftSpec.polynomial([[0.3, -0.5, 0.1]]), DriftSpec.constant(-0.2, 1)]
    bundle = sample_bundle(32, 1, 200, TimeGrid(0.0, 0.05, 8))

    def payoff(s):
        return s[:, 0] * s[:, 0]

    _, grads = baseline_policy_objective(pi, scenarios, payoff, 0.5, bundle)
    flat_grad = np.concatenate([grads[p.name].ravel() for p in pi.params])
    flat = pi.net.flat_params()
    for i in np.random.default_rng(1).choice(flat.size, 8, replace=False):
        vals = []
        for sign in (1, -1):
            moved = flat.copy()
            moved[i] += sign * 1e-6
            pi.net.set_flat_params(moved)
            vals.append(baseline_policy_objective(pi, scenarios, payoff, 0.5, bundle,
                                                  with_grad=False)[0])
        pi.net.set_flat_params(flat)
        assert (vals[0] - vals[1]) / 2e-6 == pytest.approx(flat_grad[i], rel=1e-3, abs=1e-8)
