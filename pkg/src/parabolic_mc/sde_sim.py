"""Euler-Maruyama integration on a Brownian bundle and the Lamperti transform."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericalBlowupError, UnsupportedVolatilityError
from .rng_paths import BrownianBundle, TimeGrid

BLOWUP_THRESHOLD = 1e12


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Drift mu(t, x) acting on arrays of shape (..., dim).

    ``zero`` and ``constant`` are self-explanatory; ``polynomial`` holds a
    (dim, 3) coefficient table and applies c0 + c1*x + c2*x**2 componentwise;
    ``custom`` wraps a user function ``fn(t, x)`` with an optional analytic
    divergence ``div_fn(t, x)``.  Polynomial and constant drifts also accept
    autodiff tensors for ``x``.
    """

    kind: str
    dim: int
    coeffs: np.ndarray | None = None
    fn: Callable | None = field(default=None, repr=False)
    div_fn: Callable | None = field(default=None, repr=False)
    name: str = ""
    param_box: tuple | None = None

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("drift dimension must be >= 1")
        if self.kind == "constant":
            c = np.broadcast_to(np.asarray(self.coeffs, dtype=np.float64), (self.dim,)).copy()
            object.__setattr__(self, "coeffs", c)
        elif self.kind == "polynomial":
            c = np.asarray(self.coeffs, dtype=np.float64)
            if c.shape != (self.dim, 3):
                raise ConfigurationError(f"polynomial coefficients must have shape ({self.dim}, 3)")
            object.__setattr__(self, "coeffs", c.copy())
        elif self.kind == "custom":
            if self.fn is None:
                raise ConfigurationError("custom drift needs a function")
        elif self.kind != "zero":
            raise ConfigurationError(f"unknown drift kind {self.kind!r}")
        if self.coeffs is not None and not np.all(np.isfinite(self.coeffs)):
            raise ConfigurationError("drift coefficients must be finite")
        if self.param_box is not None and self.coeffs is not None:
            lo, hi = self.param_box
            if np.any(self.coeffs < lo) or np.any(self.coeffs > hi):
                raise ConfigurationError("drift parameters outside their declared box")

    @classmethod
    def zero(cls, dim):
        return cls("zero", dim, name="zero")

    @classmethod
    def constant(cls, value, dim):
        return cls("constant", dim, coeffs=value, name="constant")

    @classmethod
    def polynomial(cls, coeffs, param_box=None):
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
        return cls("polynomial", coeffs.shape[0], coeffs=coeffs, name="polynomial",
                   param_box=param_box)

    @classmethod
    def linear(cls, offset, slope, dim):
        """mu_i(x) = offset_i + slope_i * x_i."""
        c = np.zeros((dim, 3))
        c[:, 0] = offset
        c[:, 1] = slope
        return cls("polynomial", dim, coeffs=c, name="linear")

    @classmethod
    def custom(cls, fn, dim, div_fn=None, name="custom"):
        return cls("custom", dim, fn=fn, div_fn=div_fn, name=name)

    @property
    def is_zero(self):
        return self.kind == "zero"

    @property
    def time_dependent(self):
        return self.kind == "custom"

    @property
    def key(self):
        """Hashable identity used to memoize simulated ensembles."""
        if self.kind == "custom":
            return ("custom", self.dim, id(self.fn))
        c = None if self.coeffs is None else self.coeffs.tobytes()
        return (self.kind, self.dim, c)

    def __call__(self, t, x):
        if self.kind == "zero":
            return x * 0.0
        if self.kind == "constant":
            return x * 0.0 + self.coeffs
        if self.kind == "polynomial":
            c = self.coeffs
            return c[:, 0] + x * c[:, 1] + x * x * c[:, 2]
        return self.fn(t, x)

    def divergence(self, t, x):
        """Analytic divergence sum_i d mu_i / d x_i, shape x.shape[:-1]."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind in ("zero", "constant"):
            return np.zeros(x.shape[:-1])
        if self.kind == "polynomial":
            c = self.coeffs
            return np.sum(c[:, 1] + 2.0 * c[:, 2] * x, axis=-1)
        if self.div_fn is None:
            raise ConfigurationError(f"drift {self.name!r} has no analytic divergence")
        return self.div_fn(t, x)


@dataclass(frozen=True, eq=False)
class VolSpec:
    """Diagonal volatility.

    ``unit`` and ``diagonal`` are constant, ``time`` holds ``fn(t) -> (dim,)``
    and ``state`` holds a componentwise ``fn(t, x) -> (..., dim)`` that is only
    simulated directly or removed via the Lamperti transform.
    """

    kind: str
    dim: int
    scale: np.ndarray | None = None
    fn: Callable | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "diagonal":
            s = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (self.dim,)).copy()
            if np.any(s == 0) or not np.all(np.isfinite(s)):
                raise ConfigurationError("diagonal volatility must be finite and non-zero")
            object.__setattr__(self, "scale", s)
        elif self.kind in ("time", "state"):
            if self.fn is None:
                raise ConfigurationError(f"{self.kind} volatility needs a function")
        elif self.kind != "unit":
            raise ConfigurationError(f"unknown volatility kind {self.kind!r}")

    @classmethod
    def unit(cls, dim):
        return cls("unit", dim)

    @classmethod
    def diagonal(cls, scale, dim):
        return cls("diagonal", dim, scale=scale)

    @classmethod
    def time_dependent(cls, fn, dim):
        return cls("time", dim, fn=fn)

    @classmethod
    def state_dependent(cls, fn, dim):
        return cls("state", dim, fn=fn)

    @property
    def is_unit(self):
        return self.kind == "unit"

    @property
    def depends_on_state(self):
        return self.kind == "state"

    def diag(self, t):
        """Diagonal of sigma(t) for state-independent volatilities."""
        if self.kind == "unit":
            return np.ones(self.dim)
        if self.kind == "diagonal":
            return self.scale
        if self.kind == "time":
            d = np.broadcast_to(np.asarray(self.fn(t), dtype=np.float64), (self.dim,))
            if np.any(d == 0):
                raise ConfigurationError(f"volatility is singular at t={t}")
            return d
        raise UnsupportedVolatilityError("state-dependent volatility has no time-only diagonal")

    def __call__(self, t, x):
        if self.kind == "state":
            return self.fn(t, x)
        return self.diag(t)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    states: np.ndarray = field(repr=False)
    grid: TimeGrid
    drift: DriftSpec
    vol: VolSpec
    bundle_seed: int

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def terminal(self):
        return self.states[:, -1]


def _check_finite(x, k):
    bad = ~np.isfinite(x) | (np.abs(x) > BLOWUP_THRESHOLD)
    if bad.any():
        path = int(np.argmax(bad.reshape(len(x), -1).any(axis=1)))
        raise NumericalBlowupError(f"state left the finite range on path {path} at step {k}",
                                   path=path, step=k)


def euler_maruyama(mu, sigma, bundle, n_steps=None, start=None):
    """Simulate X_{k+1} = X_k + mu(t_k, X_k) h + sigma(t_k, X_k) dW_k on the bundle.

    Returns a :class:`PathEnsemble` with states of shape (n_paths, n_steps + 1, dim).
    """
    if not isinstance(bundle, BrownianBundle):
        raise ConfigurationError("euler_maruyama needs a BrownianBundle")
    if mu.dim != bundle.dim or sigma.dim != bundle.dim:
        raise ConfigurationError(
            f"dimension mismatch: drift {mu.dim}, volatility {sigma.dim}, bundle {bundle.dim}")
    n = bundle.grid.n_steps if n_steps is None else int(n_steps)
    grid = TimeGrid(bundle.grid.t0, bundle.grid.h, n)
    h = grid.h
    start = bundle.start if start is None else np.broadcast_to(
        np.asarray(start, dtype=np.float64), (bundle.dim,))
    dw = bundle.increments
    states = np.empty((bundle.n_paths, n + 1, bundle.dim))
    states[:, 0] = start
    x = states[:, 0]
    for k in range(n):
        t = grid.time(k)
        if mu.is_zero:
            nxt = x + 0.0
        else:
            nxt = x + mu(t, x) * h
        if sigma.is_unit:
            nxt = nxt + dw[:, k]
        else:
            nxt = nxt + sigma(t, x) * dw[:, k]
        _check_finite(nxt, k + 1)
        states[:, k + 1] = nxt
        x = states[:, k + 1]
    states.flags.writeable = False
    return PathEnsemble(states, grid, mu, sigma, bundle.seed)


@dataclass(frozen=True, eq=False)
class LampertiMap:
    """Componentwise change of variables y = f(t, x) with its derivatives.

    ``forward``, ``inverse``, ``d_t``, ``d_x`` and ``d_xx`` all act
    elementwise on arrays of shape (..., dim).
    """

    forward: Callable
    inverse: Callable
    d_x: Callable
    d_xx: Callable
    d_t: Callable | None = None
    box: tuple = (-np.inf, np.inf)

    def time_derivative(self, t, x):
        if self.d_t is None:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return self.d_t(t, x)

    def ito_correction(self, t, x, sigma):
        """One half sigma^2 f'' (the diagonal Hessian trace term of Ito's lemma)."""
        s = sigma(t, x)
        return 0.5 * s * s * self.d_xx(t, x)


def log_lamperti(scale, dim, drift_shift=0.0):
    """f(t, s) = ln(s) / scale - shift * t for geometric volatility sigma(s) = scale * s.

    ``scale`` may be a per-dimension vector.  With ``drift_shift`` the time
    derivative absorbs a constant drift of the log process.
    """
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (dim,)).copy()
    shift = np.broadcast_to(np.asarray(drift_shift, dtype=np.float64), (dim,)).copy()
    return LampertiMap(
        forward=lambda t, s: np.log(s) / scale - shift * t,
        inverse=lambda t, y: np.exp(scale * (y + shift * t)),
        d_x=lambda t, s: 1.0 / (scale * s),
        d_xx=lambda t, s: -1.0 / (scale * s * s),
        d_t=lambda t, s: np.broadcast_to(-shift, np.shape(s)),
        box=(1e-8, np.inf),
    )


def _box_samples(box, dim, n=64):
    lo, hi = box
    lo = lo if np.isfinite(lo) else -10.0
    hi = hi if np.isfinite(hi) else lo + 20.0
    u = (np.arange(n) + 0.5) / n
    return np.repeat((lo + (hi - lo) * u)[:, None], dim, axis=1)


def lamperti_transform(sigma, mu, lmap, t_probe=(0.0, 0.5, 1.0)):
    """Unit-or-constant volatility SDE for Y = f(t, X).

    Returns ``(drift, vol, lmap)`` where ``drift(t, y)`` is the Ito-corrected
    drift of Y expressed in Y coordinates and ``vol`` is the constant diagonal
    f'(x) sigma(x).  Raises ``UnsupportedVolatilityError`` when f is not
    monotone on its box, the round trip fails, or f' sigma is not constant.
    """
    dim = mu.dim
    xs = _box_samples(lmap.box, dim)
    new_vol = None
    for t in t_probe:
        dfx = lmap.d_x(t, xs)
        if not (np.all(dfx > 0) or np.all(dfx < 0)):
            raise UnsupportedVolatilityError("Lamperti map is not invertible on its box")
        back = lmap.inverse(t, lmap.forward(t, xs))
        if np.max(np.abs(back - xs) / np.maximum(1.0, np.abs(xs))) > 1e-12:
            raise UnsupportedVolatilityError("Lamperti inverse does not round-trip on the box")
        v = dfx * sigma(t, xs)
        if np.max(np.abs(v - v[0])) > 1e-10 * max(1.0, np.max(np.abs(v))):
            raise UnsupportedVolatilityError("transformed volatility is not constant")
        if new_vol is None:
            new_vol = v[0].copy()
        elif np.max(np.abs(v[0] - new_vol)) > 1e-10:
            raise UnsupportedVolatilityError("transformed volatility depends on time")

    def drift(t, y):
        x = lmap.inverse(t, y)
        return (lmap.time_derivative(t, x) + lmap.d_x(t, x) * mu(t, x)
                + lmap.ito_correction(t, x, sigma))

    vol = VolSpec.unit(dim) if np.allclose(new_vol, 1.0, rtol=0, atol=1e-14) \
        else VolSpec.diagonal(new_vol, dim)
    return DriftSpec.custom(drift, dim, name=f"lamperti({mu.name})"), vol, lmap
