"""Desk-scale validation experiments with pass/fail verdicts.

Each function returns a ``CriterionResult`` whose ``values`` hold every
number the verdict depends on, so reruns can be compared bit for bit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bench import DEFAULT_X, ExperimentConfig, run_experiment
from .elbo_meta import (DriftModel, MetaConfig, PriorModel, elbo_is, few_shot_elbo, gaussian_tasks,
                        meta_train)
from .errors import ParabolicMCError
from .girsanov_fk import (BaseEnsembleCache, PdeProblem, feynman_kac_direct,
                          feynman_kac_importance, feynman_kac_importance_batch,
                          log_likelihood_ratio, solve_semilinear_reference)
from .neural.layers import (Network, NetworkSpec, act, conv, dense, forward, gradcheck,
                            relative_error)
from .ngo import (build_ngo, ngo_log_ratio, solve_linear_ngo, solve_linear_ngo_batch,
                  solve_semilinear_ngo)
from .pde_zoo import (analytic_solution, constant_drift_truth, gaussian_density,
                      make_canonical, make_random_linear_drift, normalized_error, semi_analytic)
from .recipes import train_recipe
from .rng_paths import TimeGrid, sample_bundle
from .sde_sim import DriftSpec, VolSpec, euler_maruyama


@dataclass
class CriterionResult:
    name: str
    passed: bool
    summary: str
    values: dict = field(default_factory=dict)
    wall_time: float = 0.0
    time_limit: float = float("inf")

    @property
    def within_time(self):
        return self.wall_time <= self.time_limit

    def line(self):
        verdict = "PASS" if self.passed and self.within_time else "FAIL"
        return (f"[{verdict}] {self.name}: {self.summary} "
                f"({self.wall_time:.0f} s, limit {self.time_limit:.0f} s)")


def _gaussian_problem(mu, dim):
    return PdeProblem("linear", dim, mu, VolSpec.unit(dim), p0=gaussian_density)


def _suite_drifts(n_drifts, seed):
    return [make_random_linear_drift(seed * 1000 + i, 1 + i % 10) for i in range(n_drifts)]


# --- 1: likelihood-ratio martingale -----------------------------------------------------

def martingale_suite(n_drifts=50, T=0.5, h=0.005, n_paths=10_000, seed=0, need=47):
    """Mean of exp(log ratio) of random polynomial drifts against Brownian paths from 0."""
    started = time.perf_counter()
    zero_grid = TimeGrid.from_horizon(T, h)
    means, ses, ok = [], [], []
    for i, mu in enumerate(_suite_drifts(n_drifts, seed)):
        dim = mu.dim
        bundle = sample_bundle(seed * 1000 + i, dim, n_paths, zero_grid)
        base = DriftSpec.zero(dim)
        ens = euler_maruyama(base, VolSpec.unit(dim), bundle)
        w = np.exp(log_likelihood_ratio(ens, mu, base, VolSpec.unit(dim), bundle).values)
        m, se = float(np.mean(w)), float(np.std(w, ddof=1) / np.sqrt(n_paths))
        means.append(m)
        ses.append(se)
        ok.append(abs(m - 1.0) <= 3.0 * se)
    hits = int(np.sum(ok))
    return CriterionResult("1 likelihood-ratio martingale", hits >= need,
                           f"{hits}/{n_drifts} within 3 SE of 1 (need {need})",
                           {"mean": means, "se": ses}, time.perf_counter() - started, 120.0)


# --- 2: importance sampling vs direct simulation ----------------------------------------

def importance_vs_direct(n_drifts=50, T=0.5, h=0.005, n_paths=10_000, x=0.2, seed=0, need=47):
    """IS estimate from Brownian paths against direct Euler-Maruyama, independent bundles."""
    started = time.perf_counter()
    grid = TimeGrid.from_horizon(T, h)
    direct, direct_se, imp, imp_se, ok, errors = [], [], [], [], [], []
    for i, mu in enumerate(_suite_drifts(n_drifts, seed)):
        dim = mu.dim
        problem = _gaussian_problem(mu, dim)
        point = np.full(dim, x)
        b_is = sample_bundle(seed * 1000 + i, dim, n_paths, grid)
        b_direct = sample_bundle(seed * 1000 + 500 + i, dim, n_paths, grid)
        est_is = feynman_kac_importance(problem, DriftSpec.zero(dim), T, point, b_is,
                                        BaseEnsembleCache())
        imp.append(est_is.value)
        imp_se.append(est_is.std_error)
        try:
            est_d = feynman_kac_direct(problem, T, point, b_direct)
        except ParabolicMCError as exc:
            direct.append(float("nan"))
            direct_se.append(float("nan"))
            errors.append(f"drift {i}: {type(exc).__name__}")
            ok.append(False)
            continue
        direct.append(est_d.value)
        direct_se.append(est_d.std_error)
        ok.append(abs(est_is.value - est_d.value) <= 3.0 * np.hypot(est_is.std_error,
                                                                     est_d.std_error))
    hits = int(np.sum(ok))
    note = f"; direct failures: {', '.join(errors)}" if errors else ""
    return CriterionResult("2 importance vs direct", hits >= need,
                           f"{hits}/{n_drifts} within 3 combined SE (need {need}){note}",
                           {"direct": direct, "direct_se": direct_se, "is": imp, "is_se": imp_se},
                           time.perf_counter() - started, 300.0)


# --- 3: weak error order ----------------------------------------------------------------

def weak_order(n_paths=1_000_000, hs=(0.1, 0.05, 0.025, 0.0125), T=0.5, seed=0,
               slope_range=(0.7, 1.3)):
    """Euler-Maruyama error on the Fokker-Planck OU density against step size."""
    started = time.perf_counter()
    cfg = ExperimentConfig(experiment="weak_order", pde="fp_ou", methods=["direct"], dims=[1],
                           times=[T], h=list(hs), n_paths=[n_paths], seeds=[seed],
                           timing_repeats=1)
    report = run_experiment(cfg, write=False)
    errors = []
    for hh in sorted(hs):
        rows = [r for r in report.rows if r.h == hh]
        errors.append(normalized_error([r.value for r in rows], [r.reference for r in rows]))
    slope = float(np.polyfit(np.log(sorted(hs)), np.log(errors), 1)[0])
    return CriterionResult("3 weak error order", slope_range[0] <= slope <= slope_range[1],
                           f"log-log slope {slope:.3f} (need {slope_range})",
                           {"errors": errors, "slope": slope,
                            "values": [r.value for r in report.rows]},
                           time.perf_counter() - started, 600.0)


# --- 4: canonical PDEs ------------------------------------------------------------------

def _grid(pde_name, dim):
    return [np.full(dim, v) for v in DEFAULT_X[pde_name]]


def _linear_case(pde, model, T, h_ref, n_paths, seed):
    xs = _grid(pde.id.lower(), pde.dim)
    truth = [analytic_solution(pde, T, x) for x in xs]
    ref_bundle = sample_bundle(seed, pde.dim, n_paths, TimeGrid.from_horizon(T, h_ref))
    cache = BaseEnsembleCache()
    gir = [feynman_kac_importance(pde.problem, DriftSpec.zero(pde.dim), T, x, ref_bundle,
                                  cache).value for x in xs]
    ngo_bundle = sample_bundle(seed + 1, pde.dim, n_paths, TimeGrid.from_horizon(T, model.h))
    ngo = [solve_linear_ngo(model.model, pde.problem, T, x, ngo_bundle).value for x in xs]
    return truth, gir, ngo, [0.0] * len(xs)


def _semilinear_case(pde, model, points, h_ref, n_paths, seed):
    truth, oracle_se = zip(*(semi_analytic(pde, 0.0, x) for x in points))
    horizon = pde.problem.horizon
    ref_bundle = sample_bundle(seed, pde.dim, n_paths, TimeGrid.from_horizon(horizon, h_ref))
    gir = [solve_semilinear_reference(pde.problem, 0.0, x, ref_bundle, "girsanov",
                                      DriftSpec.zero(pde.dim)).value for x in points]
    ngo_bundle = sample_bundle(seed + 1, pde.dim, n_paths,
                               TimeGrid.from_horizon(horizon, model.h))
    ngo = [solve_semilinear_ngo(model.model, pde.problem, 0.0, x, ngo_bundle).value
           for x in points]
    return list(truth), gir, ngo, list(oracle_se)


def canonical_accuracy(models=None, n_paths=20_000, h_ref=0.01, seed=0, girsanov_tol=0.05,
                       ngo_tol=0.10):
    """Normalized errors of reweighted Monte Carlo and trained NGO on the canonical PDEs.

    ``models`` maps recipe names to trained models; missing ones are trained here.
    """
    started = time.perf_counter()
    models = dict(models or {})
    for name in ("ngo_linear_1d", "ngo_linear_10d", "ngo_bsb_2d", "ngo_hjb_10d"):
        if name not in models:
            models[name] = train_recipe(name)
    cases = {
        "fp_ou_1d": _linear_case(make_canonical("fp_ou", 1), models["ngo_linear_1d"], 0.5,
                                 h_ref, n_paths, seed),
        "fp_ou_10d": _linear_case(make_canonical("fp_ou", 10), models["ngo_linear_10d"], 0.5,
                                  h_ref, n_paths, seed + 10),
        "bsb_2d": _semilinear_case(make_canonical("bsb", 2), models["ngo_bsb_2d"],
                                   [np.array([1.0, 0.5])] + _grid("bsb", 2), h_ref, n_paths,
                                   seed + 20),
        "hjb_10d": _semilinear_case(make_canonical("hjb", 10), models["ngo_hjb_10d"],
                                    [np.zeros(10), np.full(10, 0.25), np.full(10, -0.25)],
                                    h_ref, n_paths, seed + 30),
    }
    values, parts, passed = {}, [], True
    for name, (truth, gir, ngo, oracle_se) in cases.items():
        e_gir, e_ngo = normalized_error(gir, truth), normalized_error(ngo, truth)
        se_ok = all(se < 0.01 * abs(t) for se, t in zip(oracle_se, truth))
        passed &= e_gir <= girsanov_tol and e_ngo <= ngo_tol and se_ok
        values[name] = {"truth": list(truth), "girsanov": gir, "ngo": ngo,
                        "girsanov_error": e_gir, "ngo_error": e_ngo}
        parts.append(f"{name} girsanov {e_gir:.3f} ngo {e_ngo:.3f}"
                     + ("" if se_ok else " (oracle SE too large)"))
    return CriterionResult("4 canonical PDE accuracy", passed, "; ".join(parts), values,
                           time.perf_counter() - started, 1800.0)


# --- 5: NGO on the polynomial family ----------------------------------------------------

def ngo_polynomial_table(model=None, n_paths=4000, T=0.5, x=0.35, seed=0, err_tol=0.10,
                         speedup=5.0, repeats=3):
    """Held-out error of the polynomial-family NGO and its inference time against direct EM."""
    started = time.perf_counter()
    pretrained = model is not None
    model = model or train_recipe("ngo_polynomial_1d")
    train_time = model.wall_time
    problems = [_gaussian_problem(make_random_linear_drift(10_000 + seed * 100 + i, 1), 1)
                for i in range(16)]
    bundle = sample_bundle(seed + 5, 1, n_paths, TimeGrid.from_horizon(T, model.h))

    def best(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            times.append(time.perf_counter() - t0)
        return out, min(times)

    ngo_est, t_ngo = best(lambda: solve_linear_ngo_batch(model.model, problems, T, x, bundle))
    direct_est, t_direct = best(lambda: [feynman_kac_direct(p, T, x, bundle) for p in problems])
    ratio = t_direct / t_ngo
    err = model.held_out_error
    passed = err <= err_tol and train_time <= 1800.0 and ratio >= speedup
    return CriterionResult(
        "5 NGO polynomial family", passed,
        f"held-out error {err:.4f} (need <= {err_tol}), training {train_time:.0f} s, "
        f"16-drift inference {t_ngo:.3f} s vs direct {t_direct:.3f} s: speed-up {ratio:.2f}x "
        f"(need >= {speedup}x)",
        {"held_out_error": err, "ngo": [e.value for e in ngo_est],
         "direct": [e.value for e in direct_est]},
        time.perf_counter() - started + (train_time if pretrained else 0.0), 1800.0)


# --- 6: uniform convergence over a parameter grid ---------------------------------------

def uniform_convergence(n_paths=1000, factor=4, n_grid=20, reps=40, T=0.5, h=0.05, x=0.2, seed=0,
                        ratio_range=(1.4, 2.9)):
    """Mean over replications of sup_xi |p_hat - p| for constant drifts xi from one bundle."""
    started = time.perf_counter()
    xis = np.linspace(-1.0, 1.0, n_grid)
    problems = [_gaussian_problem(DriftSpec.constant(xi, 1), 1) for xi in xis]
    truth = np.array([constant_drift_truth(xi, T, np.array([x])) for xi in xis])
    sups = {}
    for n in (n_paths, factor * n_paths):
        s = []
        for r in range(reps):
            bundle = sample_bundle(seed * 10_000 + r * 7 + (n == n_paths), 1, n,
                                   TimeGrid.from_horizon(T, h))
            est = feynman_kac_importance_batch(problems, DriftSpec.zero(1), T, x, bundle,
                                               BaseEnsembleCache())
            s.append(float(np.max(np.abs([e.value for e in est] - truth))))
        sups[n] = s
    ratio = float(np.mean(sups[n_paths]) / np.mean(sups[factor * n_paths]))
    return CriterionResult("6 uniform convergence", ratio_range[0] <= ratio <= ratio_range[1],
                           f"mean sup error shrinks by {ratio:.3f} for {factor}x paths "
                           f"(need {ratio_range})",
                           {"sup_small": sups[n_paths], "sup_large": sups[factor * n_paths],
                            "ratio": ratio}, time.perf_counter() - started, 300.0)


# --- 7: gradient integrity --------------------------------------------------------------

def _net_gradcheck(spec, x, seed):
    net = Network(spec, seed=seed)
    w = np.random.default_rng(seed).normal(size=forward(net, x).shape)
    return gradcheck(lambda: (forward(net, x) * w).sum(), net.params, n_coords=64)


def gradient_integrity(tol=1e-4, n_coords=16, seed=0):
    """Reverse-mode against central differences for layers, the NGO net and ELBO_IS."""
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    errs = {
        "dense": _net_gradcheck(NetworkSpec((dense(3, 4),), 3), rng.normal(size=(5, 3)), 1),
        "tanh": _net_gradcheck(NetworkSpec((dense(3, 4), act("tanh")), 3),
                               rng.normal(size=(5, 3)), 2),
        "softplus": _net_gradcheck(NetworkSpec((dense(3, 4), act("softplus")), 3),
                                   rng.normal(size=(5, 3)), 3),
        "conv_k1": _net_gradcheck(NetworkSpec((conv(3, 4, 1),), 3), rng.normal(size=(2, 6, 3)), 4),
        "conv_k3": _net_gradcheck(NetworkSpec((conv(3, 4, 3), act("softplus")), 3),
                                  rng.normal(size=(2, 6, 3)), 5),
    }
    model = build_ngo(2, seed=6)
    model.expmart.set_flat_params(0.1 * rng.standard_normal(model.expmart.n_params))
    mu, dw = rng.normal(size=(3, 8, 2)), 0.1 * rng.normal(size=(3, 8, 2))
    errs["ngo"] = gradcheck(lambda: ngo_log_ratio(model, mu, dw, 0.01).sum(), model.expmart.params,
                            n_coords=64)
    drift = DriftModel(2, seed=7, width=8, scale=0.5)
    prior = PriorModel(2, mean=[0.2, -0.1], log_std=[0.1, 0.0])
    data = rng.normal(size=(3, 2))
    bundle = sample_bundle(seed + 26, 2, 50, TimeGrid(0.0, 0.05, 4))
    est = elbo_is(drift, prior, data, bundle)
    analytic = np.concatenate([est.gradients[p.name].ravel() for p in drift.params])
    flat = drift.net.flat_params()
    picks = rng.choice(flat.size, min(n_coords, flat.size), replace=False)
    numeric = []
    for i in picks:
        vals = []
        for sign in (1, -1):
            moved = flat.copy()
            moved[i] += sign * 1e-5
            drift.net.set_flat_params(moved)
            vals.append(elbo_is(drift, prior, data, bundle, with_grad=False).value)
        drift.net.set_flat_params(flat)
        numeric.append((vals[0] - vals[1]) / 2e-5)
    errs["elbo_is"] = relative_error(analytic[picks], numeric)
    worst = max(errs, key=errs.get)
    return CriterionResult("7 gradient integrity", all(v <= tol for v in errs.values()),
                           f"max relative error {errs[worst]:.2e} ({worst}; need <= {tol})", errs,
                           time.perf_counter() - started, 120.0)


# --- 8: meta-learned prior --------------------------------------------------------------

DESK_META = MetaConfig(lr=0.01, epochs=120, n_paths=16, n_steps=10, T=0.1, seed=0)


def meta_prior_comparison(cfg=DESK_META, n_tasks=10, n_samples=60, n_held_out=10, width=16,
                          shot_epochs=5, eval_paths=64):
    """Train a shared prior on K tasks, then few-shot fit held-out tasks from it and from N(0, I).

    Returns ``(summary dict, MetaResult)``.
    """
    tasks, _ = gaussian_tasks(n_tasks, n_samples, seed=cfg.seed)
    prior = PriorModel(2)
    drifts = [DriftModel(2, "mlp", width, 2, seed=cfg.seed + i, scale=0.1) for i in range(n_tasks)]
    res = meta_train(tasks, prior, drifts, cfg)
    summary = {"prior_mean": prior.mean.value.tolist(),
               "prior_std": np.exp(prior.log_std.value).tolist(),
               "final_elbo": res.final_elbo.tolist(),
               "final_bits_per_dim": res.bits_per_dim().tolist()}
    if n_held_out:
        held, _ = gaussian_tasks(n_held_out, n_samples, angle_offset=np.pi / n_tasks,
                                 seed=cfg.seed + 1)
        shot = replace(cfg, epochs=shot_epochs, seed=cfg.seed + 7)
        meta_vals, std_vals = [], []
        for i, task in enumerate(held):
            meta_vals.append(few_shot_elbo(task, prior, shot, drift_seed=100 + i, width=width,
                                           eval_paths=eval_paths)[0])
            std_vals.append(few_shot_elbo(task, PriorModel(2), shot, drift_seed=100 + i,
                                          width=width, eval_paths=eval_paths)[0])
        summary.update({"few_shot_meta_prior": meta_vals, "few_shot_standard_prior": std_vals,
                        "wins": int(np.sum(np.asarray(meta_vals) > np.asarray(std_vals)))})
    return summary, res


def meta_directionality(need=8, **kw):
    started = time.perf_counter()
    summary, _ = meta_prior_comparison(**kw)
    wins = summary["wins"]
    total = len(summary["few_shot_meta_prior"])
    return CriterionResult("8 meta-learned prior", wins >= need,
                           f"meta prior wins on {wins}/{total} held-out tasks (need {need})",
                           summary, time.perf_counter() - started, 900.0)


# --- 9: determinism ---------------------------------------------------------------------

def _flatten(v):
    if isinstance(v, dict):
        return [x for k in sorted(v) for x in _flatten(v[k])]
    if isinstance(v, (list, tuple, np.ndarray)):
        return [x for item in v for x in _flatten(item)]
    return [v]


def identical_values(a, b):
    """True when two ``values`` payloads agree bit for bit (NaN equals NaN)."""
    fa, fb = _flatten(a), _flatten(b)
    return len(fa) == len(fb) and all(
        x == y or (isinstance(x, float) and isinstance(y, float) and np.isnan(x) and np.isnan(y))
        for x, y in zip(fa, fb))


def determinism(first, second):
    """Compare the value payloads of two runs of the same criteria."""
    started = time.perf_counter()
    same = {a.name: identical_values(a.values, b.values) for a, b in zip(first, second)}
    bad = [k for k, v in same.items() if not v]
    return CriterionResult("9 determinism", not bad and len(first) == len(second),
                           "bit-identical reruns" if not bad else f"differs: {bad}", same,
                           time.perf_counter() - started)
