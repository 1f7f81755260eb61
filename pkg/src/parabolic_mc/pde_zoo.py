"""Canonical test problems, random drift and backward-drift families, and oracles."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .girsanov_fk import PdeProblem
from .sde_sim import DriftSpec, VolSpec

ORACLE_SEED = 20240611
ORACLE_SAMPLES = 1_000_000
_ORACLE_CHUNK = 200_000


def gaussian_density(x, var=1.0):
    """Isotropic N(x; 0, var I) evaluated on the last axis."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    return np.exp(-0.5 * np.sum(x * x, axis=-1) / var) / (2.0 * np.pi * var) ** (d / 2)


def gaussian_log_density(x, mean=0.0, var=1.0):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    z = x - mean
    return -0.5 * np.sum(z * z, axis=-1) / var - 0.5 * d * np.log(2.0 * np.pi * var)


def fp_ou_variance(t):
    return 1.5 * np.exp(2.0 * t) - 0.5


# --- random families ------------------------------------------------------------

def make_random_linear_drift(seed, dim, low=0.0, high=1.0):
    """Componentwise c0 + c1 x + c2 x^2 with coefficients i.i.d. uniform on [low, high)."""
    rng = np.random.default_rng(seed)
    return DriftSpec.polynomial(rng.uniform(low, high, size=(dim, 3)), param_box=(low, high))


@dataclass(frozen=True)
class SemilinearPhi:
    """phi(t, x, s, z) = c1 sum sin(x_i) + c2 sum z_i^2 + c3 cos(t + s)."""

    coeffs: tuple

    def __call__(self, t, x, s, z):
        c1, c2, c3 = self.coeffs
        x = np.asarray(x, dtype=np.float64)
        out = c1 * np.sum(np.sin(x), axis=-1)
        if c2 != 0.0:
            out = out + c2 * np.sum(np.asarray(z) ** 2, axis=-1)
        if c3 != 0.0:
            out = out + c3 * np.cos(t + np.asarray(s))
        return out

    @property
    def depends_on_sz(self):
        return self.coeffs[1] != 0.0 or self.coeffs[2] != 0.0


def make_random_semilinear_phi(seed, dim):
    rng = np.random.default_rng(seed)
    del dim  # the basis is dimension-agnostic
    return SemilinearPhi(tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)))


def random_semilinear_problem(phi, drift, horizon, g=None):
    """Unit-volatility semilinear problem with Z = grad p."""
    dim = drift.dim
    g = g if g is not None else (lambda x: np.sum(np.cos(x), axis=-1))
    return PdeProblem("semilinear", dim, drift, VolSpec.unit(dim), g=g, phi=phi,
                      z_from_grad=lambda x, grad: grad, horizon=horizon,
                      phi_depends_on_sz=phi.depends_on_sz, name="random_semilinear")


def gaussian_linear_problem(drift, var=1.0, r=None):
    """Unit-volatility linear problem with Gaussian initial condition."""
    dim = drift.dim
    return PdeProblem("linear", dim, drift, VolSpec.unit(dim),
                      p0=lambda x: gaussian_density(x, var), r=r, name="gaussian_linear")


def constant_drift_truth(m, T, x, var=1.0):
    """p(T, x) for constant drift m, unit volatility and p0 = N(0, var I)."""
    x = np.asarray(x, dtype=np.float64)
    return float(gaussian_density(x + np.asarray(m) * T, var + T))


# --- canonical problems -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CanonicalPde:
    id: str
    dim: int
    problem: PdeProblem = field(repr=False)
    params: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.params.get("T")

    def cache_key(self):
        blob = json.dumps({"id": self.id, "dim": self.dim, **self.params}, sort_keys=True)
        return f"{self.id.lower()}_d{self.dim}_{hashlib.sha1(blob.encode()).hexdigest()[:10]}"


def fp_ou(dim):
    """Fokker-Planck density of an OU process, solved forward with drift -x and r = dim."""
    problem = PdeProblem("linear", dim, DriftSpec.linear(0.0, -1.0, dim), VolSpec.unit(dim),
                         p0=gaussian_density, r=float(dim), name="fp_ou")
    return CanonicalPde("FP_OU", dim, problem, {})


def bs_rainbow(dim, r=0.05, vol=0.4, strike=1.0):
    """Best-asset rainbow call as an initial value problem in log coordinates.

    Simulation coordinate y = ln(s) / vol has constant drift (r - vol^2/2) / vol
    and unit volatility; the discount rate is r.
    """
    shift = (r - 0.5 * vol * vol) / vol

    def payoff(s):
        return np.maximum(np.max(s, axis=-1) - strike, 0.0)

    problem = PdeProblem(
        "linear", dim, DriftSpec.constant(shift, dim), VolSpec.unit(dim), p0=payoff, r=r,
        from_state=lambda t, s: np.log(s) / vol,
        to_state=lambda t, y: np.exp(vol * y), name="bs_rainbow")
    return CanonicalPde("BS_RAINBOW", dim, problem, {"r": r, "vol": vol, "K": strike})


def hjb_terminal(x):
    return np.log(0.5 * (1.0 + np.sum(np.asarray(x) ** 2, axis=-1)))


def hjb(dim, T=1.0):
    """p_t = -Tr(Hess p) + |grad p|^2, p(T) = ln((1 + |x|^2) / 2).

    X = sqrt(2) W, phi = -|Z|^2 / 2 with Z = sqrt(2) grad p.
    """
    root2 = np.sqrt(2.0)
    problem = PdeProblem(
        "semilinear", dim, DriftSpec.zero(dim), VolSpec.unit(dim), g=hjb_terminal,
        phi=lambda t, x, s, z: -0.5 * np.sum(z * z, axis=-1),
        z_from_grad=lambda x, grad: root2 * grad,
        from_state=lambda t, x: x / root2, to_state=lambda t, y: root2 * y,
        horizon=T, name="hjb")
    return CanonicalPde("HJB", dim, problem, {"T": T})


def bsb(dim, r=0.05, vol=0.4, T=1.0):
    """Black-Scholes-Barenblatt with p(T) = |x|^2 and phi = -r (s - Z.x), Z = grad p.

    The Lamperti coordinate y = ln(x) / vol + vol t / 2 is a driftless unit
    Brownian motion.
    """
    problem = PdeProblem(
        "semilinear", dim, DriftSpec.zero(dim), VolSpec.unit(dim),
        g=lambda x: np.sum(np.asarray(x) ** 2, axis=-1),
        phi=lambda t, x, s, z: -r * (s - np.sum(z * x, axis=-1)),
        z_from_grad=lambda x, grad: grad,
        from_state=lambda t, x: np.log(x) / vol + 0.5 * vol * t,
        to_state=lambda t, y: np.exp(vol * (y - 0.5 * vol * t)),
        horizon=T, name="bsb")
    return CanonicalPde("BSB", dim, problem, {"r": r, "vol": vol, "T": T})


CANONICAL = {"fp_ou": fp_ou, "bs_rainbow": bs_rainbow, "hjb": hjb, "bsb": bsb}


def make_canonical(name, dim, **params):
    try:
        factory = CANONICAL[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown canonical PDE {name!r}") from None
    return factory(dim, **params)


# --- analytic and semi-analytic solutions -----------------------------------------------

def _point(pde, x):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 1 and pde.dim > 1:
        x = np.full(pde.dim, x[0])
    if x.size != pde.dim or not np.all(np.isfinite(x)):
        raise UsageError(f"point must have {pde.dim} finite entries")
    return x


def _check_box(pde, t, x):
    if not np.isfinite(t) or t < 0:
        raise UsageError(f"time {t} outside the evaluator box")
    if pde.horizon is not None and t > pde.horizon + 1e-12:
        raise UsageError(f"time {t} beyond the terminal time {pde.horizon}")
    if pde.id == "FP_OU" and (t > 5.0 or np.max(np.abs(x)) > 50.0):
        raise UsageError("FP_OU evaluator box is t <= 5, |x| <= 50")
    if pde.id in ("BS_RAINBOW", "BSB") and np.any(x <= 0):
        raise UsageError(f"{pde.id} needs strictly positive coordinates")


def _gaussian_mc(seed, n, dim, fn):
    """Mean and standard error of fn(Z) over n standard normal draws (chunked)."""
    rng = np.random.default_rng(seed)
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(_ORACLE_CHUNK, n - done)
        v = fn(rng.standard_normal((m, dim)))
        total += float(np.sum(v))
        total_sq += float(np.sum(v * v))
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, float(np.sqrt(var / n))


def semi_analytic(pde, t, x, n_samples=ORACLE_SAMPLES, seed=ORACLE_SEED):
    """(value, standard error) of the exact-sampling oracle; zero SE for closed forms."""
    x = _point(pde, x)
    _check_box(pde, t, x)
    if pde.id == "FP_OU":
        return float(gaussian_density(x, fp_ou_variance(t))), 0.0
    if pde.id == "BSB":
        p = pde.params
        return float(np.exp((p["r"] + p["vol"] ** 2) * (p["T"] - t)) * np.sum(x * x)), 0.0
    if pde.id == "HJB":
        tau = pde.params["T"] - t
        if tau == 0:
            return float(hjb_terminal(x)), 0.0
        mean, se = _gaussian_mc(seed, n_samples, pde.dim,
                                lambda z: np.exp(-hjb_terminal(x + np.sqrt(2.0 * tau) * z)))
        return float(-np.log(mean)), float(se / mean)
    if pde.id == "BS_RAINBOW":
        p = pde.params
        r, vol, strike = p["r"], p["vol"], p["K"]
        if t == 0:
            return float(max(np.max(x) - strike, 0.0)), 0.0
        drift = (r - 0.5 * vol * vol) * t
        disc = np.exp(-r * t)

        def payoff(z):
            s = x * np.exp(drift + vol * np.sqrt(t) * z)
            return disc * np.maximum(np.max(s, axis=-1) - strike, 0.0)

        return _gaussian_mc(seed, n_samples, pde.dim, payoff)
    raise ConfigurationError(f"no oracle for {pde.id}")


class OracleCache:
    """Write-once CSV cache of oracle values keyed by PDE, parameters and point."""

    header = ["t", "x", "value", "std_error", "seed", "n_samples"]

    def __init__(self, directory):
        self.directory = Path(directory)

    def _path(self, pde):
        return self.directory / f"{pde.cache_key()}.csv"

    @staticmethod
    def _key(t, x):
        return f"{float(t)!r}", " ".join(repr(float(v)) for v in x)

    def load(self, pde):
        path = self._path(pde)
        rows = {}
        if path.exists():
            with path.open(newline="") as fh:
                for row in csv.DictReader(fh):
                    rows[(row["t"], row["x"], int(row["seed"]), int(row["n_samples"]))] = (
                        float(row["value"]), float(row["std_error"]))
        return rows

    def get(self, pde, t, x, n_samples=ORACLE_SAMPLES, seed=ORACLE_SEED):
        x = _point(pde, x)
        tk, xk = self._key(t, x)
        rows = self.load(pde)
        hit = rows.get((tk, xk, seed, n_samples))
        if hit is not None:
            return hit
        value, se = semi_analytic(pde, t, x, n_samples, seed)
        path = self._path(pde)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.header)
            w.writerow([tk, xk, repr(value), repr(se), seed, n_samples])
        return value, se


_memo = {}


def analytic_solution(pde, t, x, cache=None, n_samples=ORACLE_SAMPLES, seed=ORACLE_SEED):
    """Reference value p(t, x); semi-analytic oracles are memoized and optionally cached."""
    x = _point(pde, x)
    if pde.id in ("FP_OU", "BSB"):
        return semi_analytic(pde, t, x)[0]
    key = (pde.cache_key(), float(t), tuple(x), n_samples, seed)
    if key not in _memo:
        if cache is not None:
            _memo[key] = cache.get(pde, t, x, n_samples, seed)
        else:
            _memo[key] = semi_analytic(pde, t, x, n_samples, seed)
    return _memo[key][0]


def normalized_error(estimates, truths):
    """Relative L1 error sum|est - true| / sum|true|."""
    est = np.asarray(estimates, dtype=np.float64).ravel()
    tru = np.asarray(truths, dtype=np.float64).ravel()
    if est.shape != tru.shape:
        raise UsageError("estimates and truths must have equal length")
    denom = np.sum(np.abs(tru))
    if denom == 0:
        raise ConfigurationError("normalized error is undefined for all-zero truths")
    return float(np.sum(np.abs(est - tru)) / denom)
