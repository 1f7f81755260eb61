"""Exact likelihood-ratio reweighting and Monte Carlo solvers for parabolic PDEs.

Problems are simulated in a coordinate system where the volatility does not
depend on the state (after an optional Lamperti map).  ``PdeProblem`` carries
the maps between simulation coordinates ``y`` and original coordinates ``x``;
the initial, terminal, growth and backward-drift functions always receive
original coordinates.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, HorizonTooShortError, UnsupportedVolatilityError, UsageError
from .rng_paths import BrownianBundle, TimeGrid
from .sde_sim import DriftSpec, VolSpec, euler_maruyama

LOG_RATIO_CLAMP = 60.0
ESS_WARN_FRACTION = 0.01
CHUNK_ENTRIES = 1 << 22


class LowEffectiveSampleSize(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class PdeProblem:
    """A parabolic PDE in stochastic-representation form.

    ``linear``: p(T, x) = E[p0(X_T) exp(-int r)] with X_0 = x.
    ``semilinear``: terminal value problem on [t, horizon] with p(horizon, .) = g and
    backward drift ``phi(t, x, s, z)``; ``z_from_grad(x, grad_p)`` maps the
    spatial gradient to the problem's Z convention.
    ``elliptic``: exit-value problem on the box ``domain`` with boundary data g.
    """

    kind: str
    dim: int
    drift: DriftSpec
    vol: VolSpec
    p0: Callable | None = field(default=None, repr=False)
    g: Callable | None = field(default=None, repr=False)
    r: Callable | float | None = field(default=None, repr=False)
    phi: Callable | None = field(default=None, repr=False)
    z_from_grad: Callable | None = field(default=None, repr=False)
    from_state: Callable | None = field(default=None, repr=False)
    to_state: Callable | None = field(default=None, repr=False)
    domain: tuple | None = None
    horizon: float | None = None
    phi_depends_on_sz: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("linear", "semilinear", "elliptic"):
            raise ConfigurationError(f"unknown problem kind {self.kind!r}")
        if self.drift.dim != self.dim or self.vol.dim != self.dim:
            raise ConfigurationError("problem dimension does not match drift/volatility")
        if self.kind == "linear" and (self.p0 is None or self.phi is not None):
            raise ConfigurationError("linear problems need p0 and no phi")
        if self.kind == "semilinear" and (self.g is None or self.phi is None or self.horizon is None):
            raise ConfigurationError("semilinear problems need g, phi and a horizon")
        if self.kind == "elliptic" and (self.g is None or self.domain is None):
            raise ConfigurationError("elliptic problems need boundary data g and a domain")
        if self.vol.depends_on_state:
            raise UnsupportedVolatilityError(
                "state-dependent volatility must be removed with a Lamperti map first")

    def to_sim(self, t, x):
        x = np.asarray(x, dtype=np.float64)
        return x if self.from_state is None else self.from_state(t, x)

    def to_orig(self, t, y):
        return y if self.to_state is None else self.to_state(t, y)

    def growth(self, t, x):
        if self.r is None:
            return np.zeros(np.shape(x)[:-1])
        if callable(self.r):
            return self.r(t, x)
        return np.full(np.shape(x)[:-1], float(self.r))

    @property
    def has_growth(self):
        return self.r is not None and (callable(self.r) or float(self.r) != 0.0)

    def with_drift(self, drift):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw["drift"] = drift
        return PdeProblem(**kw)


@dataclass(frozen=True, eq=False)
class LogRatioEnsemble:
    values: np.ndarray = field(repr=False)
    grid: TimeGrid
    drift_key: tuple = field(repr=False)
    n_clamped: int = 0

    @property
    def ratios(self):
        return np.exp(self.values)


@dataclass
class SolutionEstimate:
    value: float
    std_error: float
    n_paths: int
    wall_time: float
    method: str
    ess: float | None = None
    n_clamped: int = 0
    n_censored: int = 0

    def __float__(self):
        return float(self.value)


def summarize(per_path, method, started, **extra):
    """Mean and standard error of a per-path estimator."""
    per_path = np.asarray(per_path, dtype=np.float64)
    n = per_path.size
    se = float(np.std(per_path, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return SolutionEstimate(float(np.mean(per_path)), se, n, time.perf_counter() - started,
                            method, **extra)


def effective_sample_size(weights):
    w = np.asarray(weights, dtype=np.float64)
    s2 = np.sum(w * w)
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def _check_ess(weights):
    ess = effective_sample_size(weights)
    if ess < ESS_WARN_FRACTION * len(weights):
        warnings.warn(f"effective sample size {ess:.1f} below {ESS_WARN_FRACTION:.0%} of "
                      f"{len(weights)} paths", LowEffectiveSampleSize, stacklevel=3)
    return ess


def _inverse_vol(sigma, t):
    if sigma.depends_on_state:
        raise UnsupportedVolatilityError(
            "likelihood ratios need a state-independent volatility (apply a Lamperti map)")
    d = sigma.diag(t)
    if np.any(d == 0):
        raise ConfigurationError("volatility matrix is singular")
    return 1.0 / d


def clamp_log_ratio(values):
    clipped = np.clip(values, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    return clipped, int(np.count_nonzero(clipped != values))


def log_ratio_increments(states, increments, grid, target_mu, base_mu, sigma):
    """Per-step log-ratio contributions, shape (n_paths, n_steps).

    Step k contributes dmu' Sigma^-1 sigma dW_k - 0.5 dmu' Sigma^-1 dmu h with
    dmu = target - base evaluated at (t_k, Y_k).
    """
    n = increments.shape[1]
    h = grid.h
    out = np.empty((states.shape[0], n))
    for k in range(n):
        t = grid.time(k)
        y = states[:, k]
        inv = _inverse_vol(sigma, t)
        dm = (target_mu(t, y) - base_mu(t, y)) * inv
        out[:, k] = np.sum(dm * increments[:, k], axis=-1) - 0.5 * np.sum(dm * dm, axis=-1) * h
    return out


def _constant_delta(target_mu, base_mu):
    kinds = {"zero", "constant"}
    if target_mu.kind in kinds and base_mu.kind in kinds:
        zero = np.zeros(target_mu.dim)
        return target_mu(0.0, zero) - base_mu(0.0, zero)
    return None


def _raw_log_ratio(states, increments, grid, target_mu, base_mu, sigma):
    delta = _constant_delta(target_mu, base_mu)
    if delta is not None and sigma.kind in ("unit", "diagonal"):
        # constant drift difference: the stochastic sum telescopes exactly
        dm = delta * _inverse_vol(sigma, grid.t0)
        w_sum = np.cumsum(increments, axis=1)[:, -1]
        return w_sum @ dm - 0.5 * float(dm @ dm) * (grid.n_steps * grid.h)
    return np.sum(log_ratio_increments(states, increments, grid, target_mu, base_mu, sigma),
                  axis=1)


def log_likelihood_ratio(ensemble, target_mu, base_mu, sigma, bundle):
    """Log of dP_target/dP_base along each base path, clamped to +-60."""
    if target_mu.dim != base_mu.dim or target_mu.dim != bundle.dim:
        raise ConfigurationError("drift dimensions do not agree")
    n = ensemble.grid.n_steps
    raw = _raw_log_ratio(ensemble.states, bundle.increments[:, :n], ensemble.grid,
                         target_mu, base_mu, sigma)
    vals, n_clamped = clamp_log_ratio(raw)
    return LogRatioEnsemble(vals, ensemble.grid, target_mu.key, n_clamped)


def horizon_bundle(bundle, t0, n_steps, start):
    """The bundle's first ``n_steps`` increments on a grid starting at ``t0``."""
    if n_steps > bundle.grid.n_steps:
        raise UsageError(f"bundle has {bundle.grid.n_steps} steps, {n_steps} requested")
    grid = TimeGrid(t0, bundle.grid.h, n_steps)
    start = np.broadcast_to(np.asarray(start, dtype=np.float64), (bundle.dim,)).copy()
    return BrownianBundle(bundle.dim, bundle.n_paths, grid, start,
                          bundle.increments[:, :n_steps], bundle.seed, bundle.antithetic)


def steps_for(bundle, duration):
    n = duration / bundle.grid.h
    k = int(round(n))
    if abs(n - k) > 1e-8 * max(1.0, n):
        raise UsageError(f"duration {duration} is not a multiple of h={bundle.grid.h}")
    if k > bundle.grid.n_steps:
        raise UsageError(f"bundle horizon {bundle.grid.n_steps * bundle.grid.h} shorter than {duration}")
    return k


def _chunks(bundle, n_steps):
    size = max(1, CHUNK_ENTRIES // max(1, (n_steps + 1) * bundle.dim))
    for p0 in range(0, bundle.n_paths, size):
        yield slice(p0, min(p0 + size, bundle.n_paths))


def _chunk_bundle(bundle, sl):
    return BrownianBundle(bundle.dim, sl.stop - sl.start, bundle.grid, bundle.start,
                          bundle.increments[sl], bundle.seed, bundle.antithetic)


def _discount(problem, grid, states):
    if not problem.has_growth:
        return 1.0
    acc = np.zeros(states.shape[0])
    for k in range(grid.n_steps):
        t = grid.time(k)
        acc = acc + problem.growth(t, problem.to_orig(t, states[:, k])) * grid.h
    return np.exp(-acc)


def _payoff(problem, grid, states):
    t = grid.T
    return problem.p0(problem.to_orig(t, states[:, -1])) * _discount(problem, grid, states)


def _require_linear(problem):
    if problem.kind != "linear":
        raise ConfigurationError(f"expected a linear problem, got {problem.kind}")


def feynman_kac_direct(problem, T, x, bundle):
    """Plain Euler-Maruyama Feynman-Kac estimate of p(T, x)."""
    _require_linear(problem)
    started = time.perf_counter()
    n = steps_for(bundle, T)
    hb = horizon_bundle(bundle, 0.0, n, problem.to_sim(0.0, x))
    per_path = np.empty(bundle.n_paths)
    for sl in _chunks(hb, n):
        ens = euler_maruyama(problem.drift, problem.vol, _chunk_bundle(hb, sl))
        per_path[sl] = _payoff(problem, ens.grid, ens.states)
    return summarize(per_path, "direct", started)


class BaseEnsembleCache:
    """Memoizes base-drift simulations keyed on (bundle, drift, volatility, horizon)."""

    def __init__(self, max_items=4):
        self.max_items = max_items
        self._items = {}
        self.misses = 0

    def get(self, bundle, base_mu, sigma, n_steps, start):
        key = (id(bundle), base_mu.key, id(sigma), n_steps, tuple(np.asarray(start).ravel()))
        hit = self._items.get(key)
        if hit is not None and hit[0] is bundle:
            return hit[1]
        self.misses += 1
        hb = horizon_bundle(bundle, 0.0, n_steps, start)
        ens = euler_maruyama(base_mu, sigma, hb)
        if len(self._items) >= self.max_items:
            self._items.pop(next(iter(self._items)))
        self._items[key] = (bundle, ens)
        return ens

    def clear(self):
        self._items.clear()


default_cache = BaseEnsembleCache()


def feynman_kac_importance_batch(problems, base_mu, T, x, bundle, cache=None):
    """Importance-sampled estimates of p(T, x) for several target drifts.

    All problems must share dimension, volatility and coordinate maps; the
    base ensemble is simulated once and reused for every target.
    """
    if not problems:
        return []
    cache = default_cache if cache is None else cache
    started = time.perf_counter()
    ref = problems[0]
    for p in problems:
        _require_linear(p)
        if p.vol is not ref.vol and p.vol.kind != ref.vol.kind:
            raise ConfigurationError("batched problems must share the volatility")
    n = steps_for(bundle, T)
    start = ref.to_sim(0.0, x)
    ens = cache.get(bundle, base_mu, ref.vol, n, start)
    increments = bundle.increments[:, :n]
    setup = time.perf_counter() - started
    out = []
    for p in problems:
        t0 = time.perf_counter()
        lr = log_likelihood_ratio(ens, p.drift, base_mu, p.vol, bundle)
        w = np.exp(lr.values)
        ess = _check_ess(w)
        per_path = _payoff(p, ens.grid, ens.states) * w
        est = summarize(per_path, "girsanov", t0, ess=ess, n_clamped=lr.n_clamped)
        est.wall_time += setup / len(problems)
        out.append(est)
    del increments
    return out


def feynman_kac_importance(problem, base_mu, T, x, bundle, cache=None):
    """Reuse paths simulated under ``base_mu`` to estimate p(T, x) for ``problem``."""
    return feynman_kac_importance_batch([problem], base_mu, T, x, bundle, cache)[0]


# --- semilinear ---------------------------------------------------------------

def quadratic_features(u):
    """[1, u_i, u_i u_j (i <= j)] for u of shape (n, d)."""
    n, d = u.shape
    iu, ju = np.triu_indices(d)
    return np.concatenate([np.ones((n, 1)), u, u[:, iu] * u[:, ju]], axis=1)


def n_quadratic_features(d):
    return 1 + d + d * (d + 1) // 2


@dataclass
class QuadraticFit:
    """Least-squares quadratic surrogate in standardized coordinates."""

    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray

    def value(self, x):
        return quadratic_features((x - self.center) / self.scale) @ self.coef

    def gradient(self, x):
        u = (x - self.center) / self.scale
        n, d = u.shape
        iu, ju = np.triu_indices(d)
        lin = self.coef[1:1 + d]
        quad = self.coef[1 + d:]
        grad = np.broadcast_to(lin, (n, d)).copy()
        # d(u_i u_j)/du_k = delta_ik u_j + delta_jk u_i
        np.add.at(grad.T, iu, (quad * u[:, ju]).T)
        np.add.at(grad.T, ju, (quad * u[:, iu]).T)
        return grad / self.scale


def fit_quadratic(x, y, weights=None):
    n, d = x.shape
    if n <= n_quadratic_features(d):
        raise ConfigurationError(
            f"regression underdetermined: {n} paths for {n_quadratic_features(d)} features")
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    feats = quadratic_features((x - center) / scale)
    if weights is not None:
        sw = np.sqrt(weights)
        coef = np.linalg.lstsq(feats * sw[:, None], y * sw, rcond=None)[0]
    else:
        coef = np.linalg.lstsq(feats, y, rcond=None)[0]
    return QuadraticFit(center, scale, coef)


def _require_semilinear(problem):
    if problem.kind != "semilinear":
        raise ConfigurationError(f"expected a semilinear problem, got {problem.kind}")


def semilinear_paths(problem, t, x, bundle, method="direct", base_mu=None):
    """Forward states (original coordinates) and full-path weights for a semilinear solve."""
    n = steps_for(bundle, problem.horizon - t)
    hb = horizon_bundle(bundle, t, n, problem.to_sim(t, x))
    if method == "direct":
        ens = euler_maruyama(problem.drift, problem.vol, hb)
        weights = None
        n_clamped = 0
    elif method == "girsanov":
        base_mu = DriftSpec.zero(problem.dim) if base_mu is None else base_mu
        ens = euler_maruyama(base_mu, problem.vol, hb)
        lr = log_likelihood_ratio(ens, problem.drift, base_mu, problem.vol, hb)
        weights = np.exp(lr.values)
        n_clamped = lr.n_clamped
    else:
        raise ConfigurationError(f"unknown semilinear method {method!r}")
    grid = ens.grid
    xs = np.stack([problem.to_orig(grid.time(k), ens.states[:, k]) for k in range(n + 1)], axis=1)
    return grid, xs, weights, n_clamped


def solve_semilinear_reference(problem, t, x, bundle, method="direct", base_mu=None):
    """Regression-based backward scheme for p(t, x).

    S_n = g(X_n); S_k = S_{k+1} + phi(t_{k+1}, X_{k+1}, p_{k+1}, Z_{k+1}) h where
    p_{k+1} and Z_{k+1} come from a weighted quadratic regression of S_{k+1}
    on X_{k+1}.  With ``method="girsanov"`` the forward paths follow ``base_mu``
    and every regression and the final mean carry the full-path ratio.
    """
    _require_semilinear(problem)
    started = time.perf_counter()
    if np.isclose(t, problem.horizon):
        x0 = np.broadcast_to(np.asarray(x, dtype=np.float64), (problem.dim,))
        return summarize(np.repeat(problem.g(x0[None])[0], bundle.n_paths), "reference", started)
    grid, xs, weights, n_clamped = semilinear_paths(problem, t, x, bundle, method, base_mu)
    n = grid.n_steps
    s = problem.g(xs[:, n])
    w = None if weights is None else weights / weights.mean()
    for k in range(n, 0, -1):
        tk = grid.time(k)
        xk = xs[:, k]
        if problem.phi_depends_on_sz:
            fit = fit_quadratic(xk, s, w)
            p_hat = fit.value(xk)
            z = problem.z_from_grad(xk, fit.gradient(xk))
            s = s + problem.phi(tk, xk, p_hat, z) * grid.h
        else:
            s = s + problem.phi(tk, xk, None, None) * grid.h
    per_path = s if weights is None else s * weights
    extra = {}
    if weights is not None:
        extra = {"ess": _check_ess(weights), "n_clamped": n_clamped}
    return summarize(per_path, "reference" if method == "direct" else "girsanov", started, **extra)


# --- elliptic -----------------------------------------------------------------

def elliptic_solve(problem, x, bundle, max_steps=None, base_mu=None, max_censored=0.2):
    """Exit-value estimate E[g(X_tau) ratio_tau exp(-int_0^tau r)] on a box domain.

    Paths follow ``base_mu`` (default: the problem's own drift) and exits are
    detected at grid times; paths still inside after ``max_steps`` are
    censored and excluded from the average.
    """
    if problem.kind != "elliptic":
        raise ConfigurationError(f"expected an elliptic problem, got {problem.kind}")
    started = time.perf_counter()
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (problem.dim,)) for b in problem.domain)
    base_mu = problem.drift if base_mu is None else base_mu
    n_max = bundle.grid.n_steps if max_steps is None else min(int(max_steps), bundle.grid.n_steps)
    h = bundle.grid.h
    y = np.tile(problem.to_sim(0.0, x), (bundle.n_paths, 1))
    log_w = np.zeros(bundle.n_paths)
    disc = np.zeros(bundle.n_paths)
    exit_state = np.full((bundle.n_paths, problem.dim), np.nan)
    alive = np.ones(bundle.n_paths, dtype=bool)

    def mark_exits(t, y, alive):
        xo = problem.to_orig(t, y)
        out = np.any((xo <= lo) | (xo >= hi), axis=1) & alive
        exit_state[out] = np.clip(xo[out], lo, hi)
        return alive & ~out

    alive = mark_exits(0.0, y, alive)
    same = base_mu is problem.drift or base_mu.key == problem.drift.key
    for k in range(n_max):
        if not alive.any():
            break
        t = k * h
        idx = np.flatnonzero(alive)
        ya = y[idx]
        dw = bundle.increments[idx, k]
        if problem.has_growth:
            disc[idx] += problem.growth(t, problem.to_orig(t, ya)) * h
        if not same:
            inv = _inverse_vol(problem.vol, t)
            dm = (problem.drift(t, ya) - base_mu(t, ya)) * inv
            log_w[idx] += np.sum(dm * dw, axis=1) - 0.5 * np.sum(dm * dm, axis=1) * h
        step = ya + (0.0 if base_mu.is_zero else base_mu(t, ya) * h)
        step = step + (dw if problem.vol.is_unit else problem.vol(t, ya) * dw)
        y[idx] = step
        alive = mark_exits(t + h, y, alive)
    censored = alive
    frac = float(censored.mean())
    if frac > max_censored:
        raise HorizonTooShortError(
            f"{frac:.1%} of paths did not exit within {n_max} steps", censored_fraction=frac)
    done = ~censored
    log_w, n_clamped = clamp_log_ratio(log_w)
    per_path = problem.g(exit_state[done]) * np.exp(log_w[done] - disc[done])
    return summarize(per_path, "elliptic", started, n_censored=int(censored.sum()),
                     n_clamped=n_clamped)
