"""Neural integrator for the stochastic exponential and its use as a PDE solver.

The expmart network reads, per time step, the drift evaluated along the
Brownian path, the Brownian increment and the step size; the sum of its
outputs over channels and time is a learned log likelihood ratio.  For
semilinear problems a second network maps (S, X) to Z.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, TrainingError, UsageError
from .girsanov_fk import (PdeProblem, feynman_kac_direct, horizon_bundle, log_likelihood_ratio,
                          steps_for, summarize)
from .neural import autodiff as ad
from .neural.checkpoint import load_checkpoint, save_checkpoint
from .neural.layers import Network, conv_stack, forward
from .neural.optim import Adam
from .pde_zoo import gaussian_density, make_random_linear_drift, normalized_error
from .rng_paths import TimeGrid, sample_bundle
from .sde_sim import DriftSpec, VolSpec, euler_maruyama

RATIO_CLAMP = 30.0
DIVERGENCE_LOSS = 1e6
DIVERGENCE_PATIENCE = 100


@dataclass
class NgoModel:
    dim: int
    expmart: Network
    grad_net: Network | None = None
    card: dict = field(default_factory=dict)

    def save(self, path):
        nets = {"expmart": self.expmart}
        if self.grad_net is not None:
            nets["grad"] = self.grad_net
        return save_checkpoint(path, nets, {"dim": self.dim, "card": self.card})

    @classmethod
    def load(cls, path):
        nets, meta = load_checkpoint(path)
        return cls(meta["dim"], nets["expmart"], nets.get("grad"), meta.get("card", {}))


def build_ngo(dim, width=None, n_hidden=5, kernel=1, seed=0, semilinear=False,
              grad_width=None, grad_hidden=5):
    """Untrained model; the last expmart layer starts at zero so the ratio is exactly 1."""
    width = 5 * dim + 50 if width is None else width
    expmart = Network(conv_stack(2 * dim + 1, width, dim, n_hidden, kernel), seed=seed,
                      zero_last=True, init="gain")
    grad_net = None
    if semilinear:
        gw = 5 * dim + 50 if grad_width is None else grad_width
        # small but nonzero output: Z = 0 is a stationary point of drivers quadratic in Z
        grad_net = Network(conv_stack(dim + 1, gw, dim, grad_hidden, kernel), seed=seed + 1,
                           init="gain", last_scale=0.01)
    return NgoModel(dim, expmart, grad_net)


def ngo_inputs(drift_values, increments, h):
    """Channels [drift; increments / sqrt(h); sqrt(h)], shape (batch, n_steps, 2 dim + 1).

    Increments are standardized so every channel is O(1) whatever the step size.
    """
    drift_values = np.asarray(drift_values, dtype=np.float64)
    increments = np.asarray(increments, dtype=np.float64)
    if drift_values.shape != increments.shape or drift_values.ndim != 3:
        raise UsageError("drift samples and increments must share a (batch, steps, dim) shape")
    return np.concatenate(
        [drift_values, increments / np.sqrt(h), np.full(drift_values.shape[:2] + (1,), np.sqrt(h))],
        axis=2)


def _check_dim(model, arr):
    if arr.shape[-1] != model.dim:
        raise UsageError(f"model dimension {model.dim} does not match input dimension {arr.shape[-1]}")


def ngo_step_logs(model, drift_values, increments, h):
    """Per-step learned log-ratio contributions (tensor of shape (batch, n_steps)).

    The network output is scaled by sqrt(h), the size of one step's true contribution.
    """
    _check_dim(model, np.asarray(increments))
    out = forward(model.expmart, ngo_inputs(drift_values, increments, h))
    return out.sum(axis=2) * np.sqrt(h)


def ngo_log_ratio(model, drift_values, increments, h):
    """Clamped learned log ratio per path (tensor)."""
    return ad.clip(ngo_step_logs(model, drift_values, increments, h).sum(axis=1),
                   -RATIO_CLAMP, RATIO_CLAMP)


def ngo_ratio(model, drift_values, increments, h):
    """Strictly positive likelihood-ratio estimate per path (numpy array)."""
    drift_values = np.asarray(drift_values, dtype=np.float64)
    increments = np.asarray(increments, dtype=np.float64)
    if drift_values.ndim == 2:
        drift_values, increments = drift_values[None], increments[None]
    with ad.no_grad():
        return np.exp(ngo_log_ratio(model, drift_values, increments, h).value)


def drift_along(drift, grid, states, scale=None):
    """drift(t_k, Y_k) for k < n_steps, optionally divided by a volatility diagonal."""
    n = grid.n_steps
    if drift.time_dependent:
        vals = np.stack([drift(grid.time(k), states[:, k]) for k in range(n)], axis=1)
    else:
        vals = drift(0.0, states[:, :n])
    if scale is not None:
        vals = vals / scale
    return np.broadcast_to(vals, states[:, :n].shape)


# --- drift families ------------------------------------------------------------------

def sample_family_drift(family, dim, rng):
    """One drift from a named family using the generator ``rng``."""
    if family == "polynomial":
        return make_random_linear_drift(int(rng.integers(2**62)), dim)
    if family == "linear":
        return DriftSpec.linear(rng.uniform(-0.5, 0.5, dim), rng.uniform(-1.5, 0.5, dim), dim)
    if family == "constant":
        return DriftSpec.constant(rng.uniform(0.0, 1.0, dim), dim)
    if family == "zero":
        return DriftSpec.zero(dim)
    raise ConfigurationError(f"unknown drift family {family!r}")


@dataclass
class TrainConfig:
    dim: int = 1
    family: str = "polynomial"
    n_paths: int = 4000
    samples_per_epoch: int = 6000
    tasks_per_iteration: int = 8
    x_box: tuple = (0.1, 0.6)
    x_sampling: str = "box"
    t_range: tuple = (0.0, 0.1)
    h: float = 0.005
    epochs: int = 1
    lr: float = 1e-3
    lr_milestones: tuple = ()
    lr_decay: float = 0.3
    loss: str = "l1"
    seed: int = 0
    width: int | None = None
    n_hidden: int = 5
    kernel: int = 1
    n_eval_tasks: int = 12
    eval_times: tuple = (0.1, 0.25, 0.5)
    eval_paths: int = 4000
    reference_paths: int = 100_000

    def __post_init__(self):
        if self.n_paths < 2:
            raise ConfigurationError("n_paths must be >= 2")
        if not (self.x_box[0] <= self.x_box[1]) or not (self.t_range[0] <= self.t_range[1]):
            raise ConfigurationError("training ranges must be non-empty")
        if self.t_range[1] < self.h:
            raise ConfigurationError("t-range must reach at least one step")
        if self.x_sampling not in ("box", "diagonal"):
            raise ConfigurationError(f"unknown x sampling {self.x_sampling!r}")
        if self.loss not in ("l1", "squared"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        if any(m < 0 for m in self.lr_milestones) or not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError("lr milestones must be >= 0 and lr_decay in (0, 1]")
        if self.epochs < 0 or self.tasks_per_iteration < 1:
            raise ConfigurationError("epochs must be >= 0 and tasks_per_iteration >= 1")

    @property
    def iterations_per_epoch(self):
        return max(1, self.samples_per_epoch // self.tasks_per_iteration)

    def to_dict(self):
        return asdict(self)

    def lr_at(self, iteration):
        """Step schedule: lr times lr_decay per milestone already passed."""
        return self.lr * self.lr_decay ** sum(iteration >= m for m in self.lr_milestones)


def _task_batch(cfg, rng):
    lo, hi = cfg.t_range
    n = max(1, int(round(rng.uniform(lo, hi) / cfg.h)))
    drifts = [sample_family_drift(cfg.family, cfg.dim, rng) for _ in range(cfg.tasks_per_iteration)]
    if cfg.x_sampling == "diagonal":
        # x = u (1, ..., 1) with u ~ U(x_box)
        u = rng.uniform(cfg.x_box[0], cfg.x_box[1], size=(cfg.tasks_per_iteration, 1))
        xs = np.repeat(u, cfg.dim, axis=1)
    else:
        xs = rng.uniform(cfg.x_box[0], cfg.x_box[1], size=(cfg.tasks_per_iteration, cfg.dim))
    return n, drifts, xs


def _iteration_seed(seed, iteration):
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def train_ngo(cfg, bundle_seed=0, model=None, log_every=0):
    """Fit the expmart network to exact importance weights (means over paths).

    Each iteration samples ``tasks_per_iteration`` drifts and starting points
    sharing one step count, draws a fresh bundle, and matches
    mean p0(Y_T) NGO against mean p0(Y_T) exp(log ratio).
    Returns ``(model, history)``.
    """
    model = model or build_ngo(cfg.dim, cfg.width, cfg.n_hidden, cfg.kernel, seed=cfg.seed)
    opt = Adam(model.expmart.params, lr=cfg.lr)
    zero = DriftSpec.zero(cfg.dim)
    unit = VolSpec.unit(cfg.dim)
    history = []
    streak = 0
    total = cfg.epochs * cfg.iterations_per_epoch
    for it in range(total):
        rng = np.random.default_rng([cfg.seed, it])
        opt.lr = cfg.lr_at(it)
        n, drifts, xs = _task_batch(cfg, rng)
        bundle = sample_bundle(_iteration_seed(bundle_seed, it), cfg.dim, cfg.n_paths,
                               TimeGrid(0.0, cfg.h, n))
        feats_mu, targets, weights = [], [], []
        for mu, x in zip(drifts, xs):
            ens = euler_maruyama(zero, unit, bundle.translated(x))
            lr = log_likelihood_ratio(ens, mu, zero, unit, bundle)
            p0 = gaussian_density(ens.terminal)
            targets.append(np.mean(p0 * np.exp(lr.values)))
            weights.append(p0)
            feats_mu.append(drift_along(mu, ens.grid, ens.states))
        drift_vals = np.concatenate(feats_mu)
        incs = np.tile(bundle.increments, (len(drifts), 1, 1))
        log_r = ngo_log_ratio(model, drift_vals, incs, cfg.h)
        ratio = ad.exp(log_r).reshape(len(drifts), cfg.n_paths)
        pred = (ratio * np.stack(weights)).mean(axis=1)
        diff = pred - np.asarray(targets)
        if cfg.loss == "l1":
            loss_t = ad.mul(diff, np.sign(diff.value)).mean()
        else:
            loss_t = (diff * diff).mean()
        opt.zero_grad()
        ad.backward(loss_t)
        try:
            opt.step()
        except TrainingError as err:
            raise TrainingError(str(err), history=history) from None
        loss = float(loss_t.value)
        history.append(loss)
        streak = streak + 1 if (not np.isfinite(loss) or loss > DIVERGENCE_LOSS) else 0
        if streak >= DIVERGENCE_PATIENCE:
            raise TrainingError("training diverged", history=history)
        if log_every and it % log_every == 0:
            print(f"iter {it:5d} loss {loss:.3e}")
    model.card.update({"train_config": cfg.to_dict(), "bundle_seed": bundle_seed,
                       "iterations": total, "loss_tail": history[-20:]})
    return model, history


# --- evaluation --------------------------------------------------------------------

@dataclass
class EvalTask:
    drift: DriftSpec
    x: np.ndarray
    T: float
    reference: float


def held_out_tasks(family, dim, n_tasks, times, x_box, h, seed, reference_paths=100_000):
    """Held-out (drift, x, T) triples with direct Euler-Maruyama reference values."""
    rng = np.random.default_rng([seed, 7919])
    tasks = []
    for i in range(n_tasks):
        mu = sample_family_drift(family, dim, rng)
        x = rng.uniform(x_box[0], x_box[1], size=dim)
        T = float(times[i % len(times)])
        problem = PdeProblem("linear", dim, mu, VolSpec.unit(dim), p0=gaussian_density)
        bundle = sample_bundle(_iteration_seed(seed + 1, i), dim, reference_paths,
                               TimeGrid.from_horizon(T, h))
        tasks.append(EvalTask(mu, x, T, feynman_kac_direct(problem, T, x, bundle).value))
    return tasks


def evaluate_ngo(model, tasks, n_paths, h, seed):
    """Normalized error of NGO estimates over held-out tasks (one bundle per horizon)."""
    ests = []
    bundles = {}
    for task in tasks:
        if task.T not in bundles:
            bundles[task.T] = sample_bundle(_iteration_seed(seed, int(task.T * 1e6)), model.dim,
                                            n_paths, TimeGrid.from_horizon(task.T, h))
        problem = PdeProblem("linear", model.dim, task.drift, VolSpec.unit(model.dim),
                             p0=gaussian_density)
        ests.append(solve_linear_ngo(model, problem, task.T, task.x, bundles[task.T]).value)
    return normalized_error(ests, [t.reference for t in tasks])


def write_model_card(path, model, cfg, held_out_error=None, extra=None):
    card = {**model.card, "train_config": cfg.to_dict(), "dim": model.dim,
            "drift_family": cfg.family, "x_box": list(cfg.x_box), "t_range": list(cfg.t_range),
            "h": cfg.h, "n_params": model.expmart.n_params,
            "held_out_normalized_error": held_out_error, **(extra or {})}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(card, indent=2))
    return card


# --- solvers -------------------------------------------------------------------------

def _vol_scale(problem):
    if problem.vol.is_unit:
        return None
    if problem.vol.kind != "diagonal":
        raise UsageError("NGO inference needs a unit or constant diagonal volatility")
    return problem.vol.scale


def _brownian_states(problem, bundle, t0, n, start):
    hb = horizon_bundle(bundle, t0, n, start)
    scale = _vol_scale(problem)
    vol = VolSpec.unit(problem.dim) if scale is None else problem.vol
    return euler_maruyama(DriftSpec.zero(problem.dim), vol, hb), scale


def solve_linear_ngo(model, problem, T, x, bundle, chunk_paths=None):
    """Brownian paths from x, learned ratio per path, mean of p0 times ratio."""
    if problem.kind != "linear":
        raise ConfigurationError("solve_linear_ngo needs a linear problem")
    if model.dim != problem.dim:
        raise UsageError(f"model dimension {model.dim} differs from problem dimension {problem.dim}")
    started = time.perf_counter()
    n = steps_for(bundle, T)
    ens, scale = _brownian_states(problem, bundle, 0.0, n, problem.to_sim(0.0, x))
    grid = ens.grid
    drift_vals = drift_along(problem.drift, grid, ens.states, scale)
    incs = bundle.increments[:, :n]
    chunk = chunk_paths or max(1, 200_000 // max(1, n))
    ratio = np.concatenate([ngo_ratio(model, drift_vals[i:i + chunk], incs[i:i + chunk], grid.h)
                            for i in range(0, bundle.n_paths, chunk)])
    payoff = problem.p0(problem.to_orig(grid.T, ens.terminal))
    if problem.has_growth:
        acc = np.zeros(bundle.n_paths)
        for k in range(n):
            t = grid.time(k)
            acc += problem.growth(t, problem.to_orig(t, ens.states[:, k])) * grid.h
        payoff = payoff * np.exp(-acc)
    return summarize(payoff * ratio, "ngo", started)


def solve_linear_ngo_batch(model, problems, T, x, bundle):
    return [solve_linear_ngo(model, p, T, x, bundle) for p in problems]


def _grad_inputs(s, x):
    return np.concatenate([np.asarray(s)[:, None], x], axis=1)[:, None, :]


def semilinear_ngo_forward(model, problem, t, x, bundle, grad_params_tensor=True):
    """Backward scheme as a differentiable computation; returns the per-path S_t tensor."""
    if model.grad_net is None:
        raise ConfigurationError("semilinear NGO needs a gradient network")
    if model.dim != problem.dim:
        raise UsageError("model and problem dimensions differ")
    n = steps_for(bundle, problem.horizon - t)
    ens, scale = _brownian_states(problem, bundle, t, n, problem.to_sim(t, x))
    grid = ens.grid
    xs = [problem.to_orig(grid.time(k), ens.states[:, k]) for k in range(n + 1)]
    with ad.no_grad():
        if problem.drift.is_zero:
            step_logs = np.zeros((bundle.n_paths, n))
        else:
            step_logs = ngo_step_logs(model, drift_along(problem.drift, grid, ens.states, scale),
                                      bundle.increments[:, :n], grid.h).value
    ratios = np.exp(np.clip(np.concatenate(
        [np.zeros((bundle.n_paths, 1)), np.cumsum(step_logs, axis=1)], axis=1),
        -RATIO_CLAMP, RATIO_CLAMP))
    s = ad.Tensor(problem.g(xs[n]) * ratios[:, n])
    if not problem.phi_depends_on_sz:
        acc = s.value.copy()
        for k in range(1, n + 1):
            acc = acc + problem.phi(grid.time(k), xs[k], None, None) * grid.h * ratios[:, k]
        return ad.Tensor(acc)
    for k in range(n, 0, -1):
        z = forward(model.grad_net, ad.concat(
            [s.reshape(-1, 1, 1), ad.Tensor(xs[k][:, None, :])], axis=2)).reshape(-1, problem.dim)
        phi = _phi_tensor(problem, grid.time(k), xs[k], s, z)
        s = s + phi * (grid.h * ratios[:, k])
    return s


def _phi_tensor(problem, t, x, s, z):
    """Evaluate phi with tensor arguments; phi must be written with +,-,*,sum-compatible ops."""
    out = problem.phi(t, x, _TensorView(s), _TensorView(z))
    return out.tensor if isinstance(out, _TensorView) else ad.as_tensor(out)


class _TensorView:
    """Adapter so numpy-style backward drifts (np.sum, np.cos, **) work on tensors."""

    __array_priority__ = 200

    def __init__(self, tensor):
        self.tensor = ad.as_tensor(tensor)

    def _wrap(self, other):
        return other.tensor if isinstance(other, _TensorView) else other

    def __add__(self, o):
        return _TensorView(self.tensor + self._wrap(o))

    __radd__ = __add__

    def __sub__(self, o):
        return _TensorView(self.tensor - self._wrap(o))

    def __rsub__(self, o):
        return _TensorView(ad.as_tensor(self._wrap(o)) - self.tensor)

    def __mul__(self, o):
        return _TensorView(self.tensor * self._wrap(o))

    __rmul__ = __mul__

    def __neg__(self):
        return _TensorView(-self.tensor)

    def __pow__(self, p):
        return _TensorView(self.tensor ** p)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        args = [i.tensor if isinstance(i, _TensorView) else i for i in inputs]
        if method != "__call__":
            return NotImplemented
        if ufunc is np.add:
            return _TensorView(ad.add(*args))
        if ufunc is np.subtract:
            return _TensorView(ad.add(args[0], ad.neg(ad.as_tensor(args[1]))))
        if ufunc is np.multiply:
            return _TensorView(ad.mul(*args))
        if ufunc is np.cos:
            return _TensorView(_cos(args[0]))
        if ufunc is np.sin:
            return _TensorView(_sin(args[0]))
        if ufunc is np.square:
            return _TensorView(ad.mul(args[0], args[0]))
        return NotImplemented

    def __array_function__(self, func, types, args, kwargs):
        if func is np.sum:
            axis = kwargs.get("axis", args[1] if len(args) > 1 else None)
            return _TensorView(ad.tsum(args[0].tensor, axis))
        if func is np.asarray:
            return args[0]
        return NotImplemented


def _cos(a):
    a = ad.as_tensor(a)
    v = a.value
    return ad._node(np.cos(v), (a,), lambda g: (-g * np.sin(v),))


def _sin(a):
    a = ad.as_tensor(a)
    v = a.value
    return ad._node(np.sin(v), (a,), lambda g: (g * np.cos(v),))


def solve_semilinear_ngo(model, problem, t, x, bundle):
    """Backward-scheme inference: mean of S at the evaluation time."""
    if problem.kind != "semilinear":
        raise ConfigurationError("solve_semilinear_ngo needs a semilinear problem")
    if model.grad_net is None:
        raise ConfigurationError("semilinear NGO needs a gradient network")
    started = time.perf_counter()
    if np.isclose(t, problem.horizon):
        x0 = np.broadcast_to(np.asarray(x, dtype=np.float64), (problem.dim,))
        return summarize(np.repeat(problem.g(x0[None])[0], bundle.n_paths), "ngo", started)
    with ad.no_grad():
        s = semilinear_ngo_forward(model, problem, t, x, bundle)
    return summarize(s.value, "ngo", started)


def train_grad_net(model, problem, points, targets, bundle_seed, n_paths, h, iterations,
                   lr=1e-3, seed=0, log_every=0):
    """Fit the Z network so that the backward scheme reproduces reference values at (t, x) points.

    ``points`` is a list of ``(t, x)``; each iteration uses one point and a
    fresh bundle.  The loss is |mean S_t - target|.
    """
    if model.grad_net is None:
        raise ConfigurationError("model has no gradient network")
    opt = Adam(model.grad_net.params, lr=lr)
    history = []
    max_steps = max(steps_for_duration(problem.horizon - tp, h) for tp, _ in points)
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        j = int(rng.integers(len(points)))
        tp, xp = points[j]
        bundle = sample_bundle(_iteration_seed(bundle_seed, it), problem.dim, n_paths,
                               TimeGrid(0.0, h, max_steps))
        s = semilinear_ngo_forward(model, problem, tp, xp, bundle)
        diff = s.mean() - targets[j]
        loss = ad.mul(diff, float(np.sign(diff.value)))
        opt.zero_grad()
        if loss.requires_grad:
            ad.backward(loss)
            opt.step()
        history.append(float(loss.value))
        if log_every and it % log_every == 0:
            print(f"iter {it:5d} loss {history[-1]:.3e}")
    return model, history


def steps_for_duration(duration, h):
    return max(1, int(round(duration / h)))
