"""Evidence lower bounds for Ito-diffusion densities and meta-learning of the prior.

Both estimators bound log p(T, x) where p(T, x) = E[exp(int div mu) p0(X_T)]:

* ``elbo_direct`` simulates X under the trainable drift and differentiates
  through the simulation;
* ``elbo_is`` reuses frozen base paths Y = x + sigma0 W and adds the log
  likelihood ratio, so gradients only touch the drift and prior parameters.

Divergences of network drifts use forward-mode tangents built from the
reverse-mode ops, so the divergence stays differentiable in the weights.
"""
from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingError, UsageError
from .neural import autodiff as ad
from .neural.layers import Network, mlp
from .neural.optim import Adam
from .rng_paths import TimeGrid, sample_bundle
from .sde_sim import DriftSpec

LOG_2PI = np.log(2.0 * np.pi)


# --- models -----------------------------------------------------------------------------

class PriorModel:
    """Standard or diagonal Gaussian prior with trainable mean and log-std."""

    def __init__(self, dim, kind="diagonal", mean=None, log_std=None, trainable=True):
        if kind not in ("standard", "diagonal"):
            raise ConfigurationError(f"unknown prior kind {kind!r}")
        self.dim = dim
        self.kind = kind
        self.trainable = trainable and kind == "diagonal"
        mean = np.zeros(dim) if mean is None else np.broadcast_to(mean, (dim,)).astype(float)
        log_std = np.zeros(dim) if log_std is None else np.broadcast_to(log_std, (dim,)).astype(float)
        self.mean = ad.Tensor(mean.copy(), requires_grad=self.trainable, name="prior.mean")
        self.log_std = ad.Tensor(log_std.copy(), requires_grad=self.trainable, name="prior.log_std")

    @classmethod
    def standard(cls, dim):
        return cls(dim, "standard")

    @property
    def params(self):
        return [self.mean, self.log_std] if self.trainable else []

    def log_density(self, x):
        """Tensor of log densities for x of shape (n, dim)."""
        z = (ad.as_tensor(x) - self.mean) * ad.exp(-self.log_std)
        return -0.5 * (z * z).sum(axis=-1) - self.log_std.sum() - 0.5 * self.dim * LOG_2PI

    def sample(self, n, rng):
        return self.mean.value + np.exp(self.log_std.value) * rng.standard_normal((n, self.dim))

    def copy(self, trainable=None):
        return PriorModel(self.dim, self.kind, self.mean.value.copy(), self.log_std.value.copy(),
                          self.trainable if trainable is None else trainable)


class DriftModel:
    """Trainable drift mu(t, x): a tanh MLP on x, a constant vector, or componentwise linear."""

    def __init__(self, dim, kind="mlp", width=32, n_hidden=2, seed=0, scale=1.0):
        self.dim = dim
        self.kind = kind
        if kind == "mlp":
            self.net = Network(mlp(dim, width, dim, n_hidden, "tanh"), seed=seed)
            if scale != 1.0:
                self.net.set_flat_params(self.net.flat_params() * scale)
            self._params = self.net.params
        elif kind == "constant":
            rng = np.random.default_rng(seed)
            self.offset = ad.Tensor(scale * rng.uniform(-1, 1, dim), True, "drift.offset")
            self._params = [self.offset]
        elif kind == "linear":
            rng = np.random.default_rng(seed)
            self.offset = ad.Tensor(scale * rng.uniform(-1, 1, dim), True, "drift.offset")
            self.slope = ad.Tensor(scale * rng.uniform(-1, 1, dim), True, "drift.slope")
            self._params = [self.offset, self.slope]
        else:
            raise ConfigurationError(f"unknown drift model {kind!r}")

    @property
    def params(self):
        return self._params

    def __call__(self, t, x):
        x = ad.as_tensor(x)
        if self.kind == "mlp":
            return self.net(x)
        if self.kind == "constant":
            return x * 0.0 + self.offset
        return x * self.slope + self.offset

    def jvp(self, x, tangents):
        """(mu(x), J(x) v) for tangents of shape (p, n, dim); both as tensors."""
        x = ad.as_tensor(x)
        tangents = ad.as_tensor(tangents)
        if self.kind == "constant":
            return self(0.0, x), tangents * 0.0
        if self.kind == "linear":
            return self(0.0, x), tangents * self.slope
        a, da = x, tangents
        it = iter(self.net.params)
        for layer in self.net.spec.layers:
            if layer.kind == "dense":
                w, b = next(it), next(it)
                a = ad.add(ad.matmul(a, w), b)
                da = ad.matmul(da, w)
            elif layer.kind == "tanh":
                a = ad.tanh(a)
                da = da * (1.0 - a * a)
            elif layer.kind == "softplus":
                sig = ad.reciprocal(1.0 + ad.exp(-a))
                a = ad.softplus(a)
                da = da * sig
            else:
                raise UsageError(f"jvp does not support {layer.kind} layers")
        return a, da


def _rademacher(shape, seed):
    return np.random.default_rng(seed).integers(0, 2, size=shape) * 2.0 - 1.0


def divergence(mu, t, x, mode="exact", n_probes=32, seed=0):
    """Divergence sum_i d mu_i / d x_i at each row of x.

    ``DriftSpec`` drifts use their analytic divergence (numpy).  Drift models
    return a tensor that is differentiable in the model parameters; the exact
    mode pushes the ``dim`` unit tangents, the Hutchinson mode averages
    eps' J eps over Rademacher probes.
    """
    if isinstance(mu, DriftSpec):
        if mode == "exact":
            return mu.divergence(t, x)
        eps = _rademacher((n_probes,) + np.shape(x), seed)
        return np.mean(np.sum(eps * _spec_jvp(mu, t, x, eps), axis=-1), axis=0)
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, ad.Tensor) else x
    n, d = x.shape
    if mode == "exact":
        tangents = np.broadcast_to(np.eye(d)[:, None, :], (d, n, d))
        _, jv = mu.jvp(x, tangents)
        idx = np.arange(d)
        return jv[idx, :, idx].sum(axis=0)
    if mode == "hutchinson":
        eps = _rademacher((n_probes, n, d), seed)
        _, jv = mu.jvp(x, eps)
        return (jv * eps).sum(axis=2).mean(axis=0)
    raise ConfigurationError(f"unknown divergence mode {mode!r}")


def _spec_jvp(mu, t, x, v, step=1e-6):
    return (mu(t, x + step * v) - mu(t, x - step * v)) / (2 * step)


def default_divergence_mode(dim):
    return "exact" if dim <= 10 else "hutchinson"


# --- estimators -----------------------------------------------------------------------

@dataclass
class ElboEstimate:
    value: float
    breakdown: dict
    term_variances: dict
    std_error: float
    n_samples: int
    gradients: dict = field(default_factory=dict)

    def bits_per_dim(self, dim):
        return -self.value / (dim * np.log(2.0))


CHUNK_ROWS = 32768


def _params_of(mu, prior):
    ps = list(getattr(mu, "params", []))
    return ps + prior.params


def _accumulate(chunks, n_rows, params, with_grad, accumulate=False):
    """Evaluate per-row term tensors chunk by chunk.

    ``chunks`` yields ``{term: tensor(rows,)}``.  When ``with_grad`` the mean's
    gradient is accumulated into the parameters' ``.grad`` slots (zeroed first
    unless ``accumulate``), so each chunk's graph is freed before the next.
    """
    if with_grad and not accumulate:
        for p in params:
            p.grad = None
    with nullcontext() if with_grad else ad.no_grad():
        per_term = _consume(chunks, n_rows, with_grad)
    per_term = {k: np.concatenate(v) for k, v in per_term.items()}
    per = sum(per_term.values())
    value = float(np.mean(per))
    breakdown = {k: float(np.mean(v)) for k, v in per_term.items()}
    variances = {k: float(np.var(v)) for k, v in per_term.items()}
    grads = {}
    if with_grad:
        grads = {p.name or f"param[{i}]": (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
                 for i, p in enumerate(params)}
    se = float(np.std(per, ddof=1) / np.sqrt(per.size)) if per.size > 1 else 0.0
    return ElboEstimate(value, breakdown, variances, se, int(per.size), grads)


def _consume(chunks, n_rows, with_grad):
    per_term = {}
    for terms in chunks:
        total = None
        for k, t in terms.items():
            per_term.setdefault(k, []).append(np.asarray(t.value))
            total = t if total is None else total + t
        if not np.all(np.isfinite(total.value)):
            raise TrainingError("non-finite ELBO",
                                breakdown={k: float(np.mean(np.concatenate(v)))
                                           for k, v in per_term.items()})
        if with_grad and total.requires_grad:
            ad.backward(total.sum() * (1.0 / n_rows))
    return per_term


def _rows(data, bundle):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[1] != bundle.dim:
        raise UsageError("data dimension does not match the bundle")
    return data


def _vol_diag(sigma, dim):
    s = np.broadcast_to(np.asarray(1.0 if sigma is None else sigma, dtype=np.float64), (dim,))
    if np.any(s == 0):
        raise ConfigurationError("base volatility is singular")
    return s


def _drift_and_div(mu, t, x, mode, n_probes, probe_seed):
    if isinstance(mu, DriftSpec):
        xv = x.value if isinstance(x, ad.Tensor) else x
        return (ad.Tensor(mu(t, xv)),
                ad.Tensor(np.asarray(divergence(mu, t, xv, mode, n_probes, probe_seed))))
    return mu(t, x), ad.as_tensor(divergence(mu, t, x, mode, n_probes, probe_seed))


def _base_paths(base_drift, s, data, bundle):
    """Base-process states for every (data point, path): shape (M, N, n+1, d)."""
    d = bundle.dim
    w = np.concatenate([np.zeros((bundle.n_paths, 1, d)), np.cumsum(bundle.increments, axis=1)],
                       axis=1)
    if base_drift is None or base_drift.is_zero:
        return data[:, None, None, :] + s * w[None]
    grid = bundle.grid
    ys = np.empty((data.shape[0], bundle.n_paths, grid.n_steps + 1, d))
    y = np.repeat(data[:, None, :], bundle.n_paths, axis=1)
    ys[:, :, 0] = y
    for k in range(grid.n_steps):
        flat = y.reshape(-1, d)
        y = y + base_drift(grid.time(k), flat).reshape(y.shape) * grid.h + s * bundle.increments[:, k]
        ys[:, :, k + 1] = y
    return ys


def elbo_is(mu, prior, data, bundle, sigma=None, div_mode=None, n_probes=32, probe_seed=0,
            with_grad=True, accumulate=False, chunk_rows=CHUNK_ROWS, base_drift=None):
    """Importance-sampled ELBO with frozen base paths Y = x + sigma W.

    Per (data point, path): sum_k mu^T Sigma^-1 sigma dW_k
    - sum_k (0.5 mu^T Sigma^-1 mu - div mu) h + log p0(Y_T), with the drift
    evaluated at the left endpoints.  A non-zero ``base_drift`` (DriftSpec)
    simulates Y under it and replaces mu by mu - base_drift in the ratio terms.
    """
    data = _rows(data, bundle)
    d = bundle.dim
    s = _vol_diag(sigma, d)
    grid = bundle.grid
    n, h = grid.n_steps, grid.h
    n_paths = bundle.n_paths
    mode = div_mode or default_divergence_mode(d)
    base = _base_paths(base_drift, s, data, bundle).reshape(-1, n + 1, d)
    shifted = base_drift is not None and not base_drift.is_zero
    per_chunk = max(1, chunk_rows // max(n, 1))
    rows = data.shape[0] * n_paths

    def chunks():
        for lo in range(0, rows, per_chunk):
            idx = np.arange(lo, min(lo + per_chunk, rows))
            ys = base[idx]                                          # (r, n+1, d)
            left = ys[:, :n].reshape(-1, d)
            incs = bundle.increments[idx % n_paths].reshape(-1, d)
            mu_v, div_v = _drift_and_div(mu, 0.0, left, mode, n_probes, probe_seed)
            if shifted:
                times = np.tile(grid.times[:n], idx.size)
                mu_v = mu_v - _base_eval(base_drift, times, left)
            scaled = mu_v * (1.0 / s)
            r = idx.size
            yield {
                "stochastic": (mu_v * (incs / s)).sum(axis=1).reshape(r, n).sum(axis=1),
                "quadratic": -((scaled * scaled).sum(axis=1) * (0.5 * h)).reshape(r, n).sum(axis=1),
                "divergence": (div_v * h).reshape(r, n).sum(axis=1),
                "prior": prior.log_density(ys[:, -1]),
            }

    return _accumulate(chunks(), rows, _params_of(mu, prior), with_grad, accumulate)


def _base_eval(base_drift, times, x):
    if not base_drift.time_dependent:
        return base_drift(0.0, x)
    return np.stack([base_drift(t, row[None])[0] for t, row in zip(times, x)])


def elbo_direct(mu, prior, data, bundle, sigma=None, div_mode=None, n_probes=32, probe_seed=0,
                with_grad=True, accumulate=False, chunk_rows=CHUNK_ROWS):
    """ELBO with paths simulated under ``mu`` (gradients flow through the simulation)."""
    data = _rows(data, bundle)
    d = bundle.dim
    s = _vol_diag(sigma, d)
    grid = bundle.grid
    n_paths = bundle.n_paths
    mode = div_mode or default_divergence_mode(d)
    rows = data.shape[0] * n_paths
    per_chunk = max(1, chunk_rows // 4)

    def chunks():
        for lo in range(0, rows, per_chunk):
            idx = np.arange(lo, min(lo + per_chunk, rows))
            x = ad.Tensor(data[idx // n_paths])
            incs = bundle.increments[idx % n_paths]
            div_acc = None
            for k in range(grid.n_steps):
                drift, div = _drift_and_div(mu, grid.time(k), x, mode, n_probes, probe_seed + k)
                div_acc = div * grid.h if div_acc is None else div_acc + div * grid.h
                x = x + drift * grid.h + s * incs[:, k]
                if not np.all(np.isfinite(x.value)):
                    raise TrainingError(f"simulation blew up at step {k + 1}")
            yield {"divergence": div_acc, "prior": prior.log_density(x)}

    return _accumulate(chunks(), rows, _params_of(mu, prior), with_grad, accumulate)


# --- meta-learning ------------------------------------------------------------------------

@dataclass
class MetaConfig:
    lr: float = 8e-4
    epochs: int = 50
    n_paths: int = 75
    T: float = 0.1
    n_steps: int = 40
    sigma: float = 1.0
    seed: int = 0
    train_prior: bool = True
    div_mode: str | None = None

    def grid(self):
        return TimeGrid(0.0, self.T / self.n_steps, self.n_steps)


@dataclass
class MetaResult:
    prior: PriorModel
    drifts: list
    curves: np.ndarray
    final_elbo: np.ndarray

    def bits_per_dim(self):
        return -self.final_elbo / (self.prior.dim * np.log(2.0))


def meta_train(tasks, prior, drifts, cfg):
    """Joint ascent on sum_i ELBO_IS(task_i; mu_i, prior) with one shared bundle per epoch.

    Returns per-task ELBO curves of shape (epochs, K).
    """
    if not tasks:
        raise ConfigurationError("meta_train needs at least one task")
    if len(drifts) != len(tasks):
        raise ConfigurationError("one drift model per task is required")
    if any(len(t) == 0 for t in tasks):
        raise ConfigurationError("task sample sets must be non-empty")
    dim = prior.dim
    params = [p for mu in drifts for p in mu.params]
    if cfg.train_prior:
        params += prior.params
    opt = Adam(params, lr=cfg.lr)
    curves = np.zeros((cfg.epochs, len(tasks)))
    for epoch in range(cfg.epochs):
        bundle = sample_bundle(int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]),
                               dim, cfg.n_paths, cfg.grid())
        opt.zero_grad()
        for i, (data, mu) in enumerate(zip(tasks, drifts)):
            est = elbo_is(mu, prior, data, bundle, cfg.sigma, cfg.div_mode, accumulate=True)
            curves[epoch, i] = est.value
        for p in params:
            if p.grad is not None:
                p.grad = -p.grad
        opt.step()
    final = curves[-1] if cfg.epochs else np.zeros(len(tasks))
    return MetaResult(prior, drifts, curves, final)


def few_shot_elbo(task, prior, cfg, drift_seed=0, width=16, n_hidden=2, eval_paths=None):
    """Fine-tune a copy of ``prior`` and a fresh drift for ``cfg.epochs`` epochs on one task.

    Returns ``(final ELBO on a separate evaluation bundle, MetaResult)``.
    """
    start = PriorModel(prior.dim, "diagonal", prior.mean.value, prior.log_std.value,
                       trainable=cfg.train_prior)
    drift = DriftModel(prior.dim, "mlp", width, n_hidden, seed=drift_seed, scale=0.1)
    res = meta_train([task], start, [drift], cfg)
    bundle = sample_bundle(int(np.random.SeedSequence([cfg.seed, 10_000]).generate_state(1)[0]),
                           prior.dim, eval_paths or cfg.n_paths, cfg.grid())
    return elbo_is(drift, start, task, bundle, cfg.sigma, cfg.div_mode, with_grad=False).value, res


def gaussian_tasks(n_tasks, n_samples, radius=2.0, std=0.5, angle_offset=0.0, seed=0):
    """2d Gaussian sample sets with means evenly spaced on a circle."""
    rng = np.random.default_rng(seed)
    angles = angle_offset + 2 * np.pi * np.arange(n_tasks) / n_tasks
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return [m + std * rng.standard_normal((n_samples, 2)) for m in means], means


# --- baseline objective ------------------------------------------------------------------------

def tensor_log_ratio(target, base, states, increments, h, sigma=None):
    """Differentiable log dP_target/dP_base along paths (lists of per-step tensors)."""
    d = increments.shape[-1]
    s = _vol_diag(sigma, d)
    total = None
    for k in range(increments.shape[1]):
        dm = (target(k, states[k]) - base(k, states[k])) * (1.0 / s)
        term = (dm * increments[:, k]).sum(axis=1) - (dm * dm).sum(axis=1) * (0.5 * h)
        total = term if total is None else total + term
    return total


def _spec_on_tensor(mu, t, y):
    """Evaluate a DriftSpec on a tensor, differentiably for closed-form kinds."""
    if mu.kind == "zero":
        return y * 0.0
    if mu.kind == "constant":
        return y * 0.0 + mu.coeffs
    if mu.kind == "polynomial":
        c = mu.coeffs
        return y * c[:, 1] + y * y * c[:, 2] + c[:, 0]
    return ad.as_tensor(mu(t, y.value))


def baseline_policy_objective(pi, scenario_drifts, payoff, x0, bundle, sigma=None,
                              with_grad=True):
    """sum_i E_pi[J(S_T) exp(log dP_i/dP_pi)] with paths simulated once under pi.

    Returns ``(value, gradients)``; gradients are taken w.r.t. ``pi.params``
    through both the simulated paths and the reweighting.
    """
    d = bundle.dim
    s = _vol_diag(sigma, d)
    grid = bundle.grid
    x = ad.Tensor(np.tile(np.broadcast_to(np.asarray(x0, dtype=float), (d,)), (bundle.n_paths, 1)))
    states = []
    for k in range(grid.n_steps):
        states.append(x)
        x = x + pi(grid.time(k), x) * grid.h + s * bundle.increments[:, k]
    j = ad.as_tensor(payoff(x))
    total = None
    for mu in scenario_drifts:
        lr = tensor_log_ratio(lambda k, y, mu=mu: _spec_on_tensor(mu, grid.time(k), y),
                              lambda k, y: pi(grid.time(k), y),
                              states, bundle.increments, grid.h, s)
        term = (j * ad.exp(ad.clip(lr, -60.0, 60.0))).mean()
        total = term if total is None else total + term
    grads = {}
    if with_grad and total.requires_grad:
        for p in pi.params:
            p.grad = None
        ad.backward(total)
        grads = {p.name or f"param[{i}]": p.grad.copy() for i, p in enumerate(pi.params)}
    return float(total.value), grads
