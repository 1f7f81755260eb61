"""Seeded Brownian bundles built on a counter-based normal generator.

Every increment is a pure function of ``(seed, path, step, dim)``: a
SplitMix64-style hash chain produces 53 uniform bits which are pushed through
the inverse normal CDF.  Any entry can therefore be regenerated on its own,
and filling a bundle in parallel cannot change its contents.
"""
from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import ndtri

from .errors import ConfigurationError, UsageError

FORMAT_VERSION = 1

_U64 = np.uint64
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_PATH_MUL = _U64(0xD6E8FEB86659FD93)
_STEP_MUL = _U64(0xA0761D6478BD642F)
_DIM_MUL = _U64(0xE7037ED1A0B428DB)
_INV_2_53 = 2.0 ** -53

_draw_lock = threading.Lock()
_draws = 0


def draw_count():
    """Number of normal variates produced by the counter generator so far."""
    return _draws


def reset_draw_count():
    global _draws
    with _draw_lock:
        _draws = 0


def _count(n):
    global _draws
    with _draw_lock:
        _draws += int(n)


def _mix(z):
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _as_u64(v):
    return np.asarray(v, dtype=np.int64).astype(_U64)


def seed_key(seed):
    with np.errstate(over="ignore"):
        return _mix(_U64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLDEN + _U64(0x632BE59BD9B4E019))


def counter_uniforms(seed, path, step, dim):
    """Uniforms in the open interval (0, 1) keyed on broadcastable index arrays."""
    key = seed_key(int(seed))
    with np.errstate(over="ignore"):
        z = _mix(key ^ ((_as_u64(path) + _U64(1)) * _PATH_MUL))
        z = _mix(z + (_as_u64(step) + _U64(1)) * _STEP_MUL)
        z = _mix(z ^ ((_as_u64(dim) + _U64(1)) * _DIM_MUL))
    return ((z >> _U64(11)).astype(np.float64) + 0.5) * _INV_2_53


def counter_normals(seed, path, step, dim):
    """Standard normals for the index triple(s); pure function of its inputs."""
    out = ndtri(counter_uniforms(seed, path, step, dim))
    _count(np.size(out))
    return out


def counter_uniform_stream(seed, n, stream=0):
    """Flat stream of ``n`` uniforms, used for parameter draws (not paths)."""
    idx = np.arange(n)
    return counter_uniforms(seed, np.full(n, -1 - stream), idx, 0)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    h: float
    n_steps: int

    def __post_init__(self):
        if not (self.h > 0 and np.isfinite(self.h)):
            raise ConfigurationError(f"step size must be positive and finite, got {self.h}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if not np.isfinite(self.T):
            raise ConfigurationError("terminal time is not finite")

    @property
    def T(self):
        return self.t0 + self.h * self.n_steps

    @property
    def times(self):
        return self.t0 + self.h * np.arange(self.n_steps + 1)

    def time(self, k):
        return self.t0 + self.h * k

    def steps_to(self, T):
        """Number of steps needed to reach absolute time ``T`` from ``t0``."""
        n = (T - self.t0) / self.h
        k = int(round(n))
        if abs(n - k) > 1e-8 * max(1.0, abs(n)):
            raise UsageError(f"time {T} is not on the grid (t0={self.t0}, h={self.h})")
        if k < 0 or k > self.n_steps:
            raise UsageError(f"time {T} outside grid horizon [{self.t0}, {self.T}]")
        return k

    @classmethod
    def from_horizon(cls, T, h, t0=0.0):
        n = int(round((T - t0) / h))
        return cls(t0, h, max(n, 1))


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Immutable ensemble of Brownian increments, indexed (path, step, dim)."""

    dim: int
    n_paths: int
    grid: TimeGrid
    start: np.ndarray
    increments: np.ndarray = field(repr=False)
    seed: int
    antithetic: bool = False

    @cached_property
    def paths(self):
        """Cumulative states W(p, k), shape (n_paths, n_steps + 1, dim)."""
        stacked = np.concatenate(
            [np.broadcast_to(self.start, (self.n_paths, 1, self.dim)), self.increments], axis=1
        )
        out = np.cumsum(stacked, axis=1)
        out.flags.writeable = False
        return out

    @property
    def h(self):
        return self.grid.h

    def translated(self, start):
        """Same increments, new starting point."""
        start = _as_point(start, self.dim)
        return BrownianBundle(self.dim, self.n_paths, self.grid, start, self.increments,
                              self.seed, self.antithetic)

    def truncated(self, n_steps):
        """View on the first ``n_steps`` increments."""
        if n_steps < 1 or n_steps > self.grid.n_steps:
            raise UsageError(f"cannot truncate to {n_steps} steps")
        grid = TimeGrid(self.grid.t0, self.grid.h, n_steps)
        return BrownianBundle(self.dim, self.n_paths, grid, self.start,
                              self.increments[:, :n_steps], self.seed, self.antithetic)

    def coarsened(self, factor):
        """Same Brownian paths on a grid with step ``factor * h`` (summed increments)."""
        factor = int(factor)
        if factor < 1 or self.grid.n_steps % factor:
            raise UsageError(f"cannot coarsen {self.grid.n_steps} steps by {factor}")
        if factor == 1:
            return self
        n = self.grid.n_steps // factor
        inc = self.increments.reshape(self.n_paths, n, factor, self.dim).sum(axis=2)
        inc.flags.writeable = False
        return BrownianBundle(self.dim, self.n_paths, TimeGrid(self.grid.t0, self.grid.h * factor, n),
                              self.start, inc, self.seed, self.antithetic)

    def subset(self, paths):
        paths = np.asarray(paths)
        return BrownianBundle(self.dim, len(paths), self.grid, self.start,
                              self.increments[paths], self.seed, self.antithetic)

    def descriptor(self):
        return {
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "n_paths": self.n_paths,
            "grid": {"t0": self.grid.t0, "h": self.grid.h, "n_steps": self.grid.n_steps},
            "start": [float(v) for v in self.start],
            "seed": self.seed,
            "antithetic": self.antithetic,
        }

    def to_json(self):
        return json.dumps(self.descriptor(), indent=2)

    @classmethod
    def from_descriptor(cls, desc, threads=1):
        if desc.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported bundle format {desc.get('format_version')}")
        g = desc["grid"]
        return sample_bundle(desc["seed"], desc["dim"], desc["n_paths"],
                             TimeGrid(g["t0"], g["h"], g["n_steps"]), desc["start"],
                             desc["antithetic"], threads=threads)

    @classmethod
    def from_json(cls, text, threads=1):
        return cls.from_descriptor(json.loads(text), threads=threads)


def _as_point(start, dim):
    start = np.array(start, dtype=np.float64).reshape(-1)
    if start.size == 1 and dim > 1:
        start = np.full(dim, start[0])
    if start.size != dim:
        raise ConfigurationError(f"start has {start.size} entries, expected {dim}")
    return start


def increment_entry(seed, path, step, dim_index, h, antithetic=False):
    """Single increment computed in isolation (random-access check)."""
    if antithetic:
        z = counter_normals(seed, path // 2, step, dim_index)
        z = -z if path % 2 else z
    else:
        z = counter_normals(seed, path, step, dim_index)
    return float(np.sqrt(h) * z)


def _fill(out, seed, p0, p1, n_steps, dim, scale, antithetic):
    if antithetic:
        base = np.arange(p0 // 2, (p1 + 1) // 2)
        z = counter_normals(seed, base[:, None, None], np.arange(n_steps)[None, :, None],
                            np.arange(dim)[None, None, :])
        pair = np.empty((2 * len(base), n_steps, dim))
        pair[0::2] = z
        pair[1::2] = -z
        start = p0 - 2 * (p0 // 2)
        out[p0:p1] = scale * pair[start:start + (p1 - p0)]
    else:
        z = counter_normals(seed, np.arange(p0, p1)[:, None, None],
                            np.arange(n_steps)[None, :, None], np.arange(dim)[None, None, :])
        out[p0:p1] = scale * z


def sample_bundle(seed, dim, n_paths, grid, start=0.0, antithetic=False, threads=1,
                  chunk_paths=None):
    """Generate a bundle of ``n_paths`` Brownian paths on ``grid`` from ``start``.

    Parameters
    ----------
    seed : int
        Key of the counter generator.
    dim, n_paths : int
        Dimension and number of paths. ``n_paths`` must be even when
        ``antithetic`` is set (path ``2j+1`` mirrors path ``2j``).
    grid : TimeGrid
    start : float or array_like
        Starting point, broadcast to ``dim`` entries.
    threads : int
        Worker threads used to fill path chunks; the result does not depend on it.
    """
    if not isinstance(grid, TimeGrid):
        raise ConfigurationError("grid must be a TimeGrid")
    if dim < 1 or n_paths < 1:
        raise ConfigurationError("dim and n_paths must be >= 1")
    if antithetic and n_paths % 2:
        raise ConfigurationError("antithetic bundles need an even number of paths")
    start = _as_point(start, dim)
    n_steps = grid.n_steps
    out = np.empty((n_paths, n_steps, dim))
    scale = np.sqrt(grid.h)
    if chunk_paths is None:
        chunk_paths = max(2, (1 << 21) // max(1, n_steps * dim))
    chunk_paths += chunk_paths % 2
    bounds = [(p, min(p + chunk_paths, n_paths)) for p in range(0, n_paths, chunk_paths)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda b: _fill(out, seed, b[0], b[1], n_steps, dim, scale, antithetic),
                          bounds))
    else:
        for p0, p1 in bounds:
            _fill(out, seed, p0, p1, n_steps, dim, scale, antithetic)
    if not np.all(np.isfinite(out)):
        raise ConfigurationError("non-finite increments generated")
    out.flags.writeable = False
    return BrownianBundle(dim, n_paths, grid, start, out, int(seed), bool(antithetic))


def bundle_from_increments(increments, grid, start=0.0, seed=-1):
    """Wrap explicit increments (testing and hand-built examples)."""
    inc = np.array(increments, dtype=np.float64)
    if inc.ndim == 1:
        inc = inc[None, :, None]
    n_paths, n_steps, dim = inc.shape
    if n_steps != grid.n_steps:
        raise ConfigurationError("increments do not match the grid")
    inc.flags.writeable = False
    return BrownianBundle(dim, n_paths, grid, _as_point(start, dim), inc, seed, False)


def path_value(bundle, path, step):
    """W(path, step): start plus the first ``step`` increments of ``path``."""
    if not (0 <= path < bundle.n_paths) or not (0 <= step <= bundle.grid.n_steps):
        raise UsageError(f"index ({path}, {step}) out of range")
    return bundle.paths[path, step].copy()
