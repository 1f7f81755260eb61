"""Experiment configuration, execution grid and versioned CSV/JSON reports."""
from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, MissingArtifactError, ParabolicMCError
from .girsanov_fk import (BaseEnsembleCache, feynman_kac_direct, feynman_kac_importance,
                          solve_semilinear_reference)
from .ngo import NgoModel, solve_linear_ngo, solve_semilinear_ngo
from .pde_zoo import CANONICAL, OracleCache, analytic_solution, make_canonical, normalized_error
from .rng_paths import TimeGrid, sample_bundle
from .sde_sim import DriftSpec

SCHEMA = "report/v1"
METHODS = ("direct", "girsanov", "ngo", "analytic")
METHOD_ALIASES = {"direct-em": "direct", "em": "direct", "is": "girsanov", "importance": "girsanov"}
DEFAULT_X = {
    "fp_ou": [-1.0, -0.5, 0.0, 0.5, 1.0],
    "hjb": [-1.0, -0.5, 0.0, 0.5, 1.0],
    "bs_rainbow": [0.8, 0.9, 1.0, 1.1, 1.2],
    "bsb": [0.5, 0.75, 1.0, 1.25, 1.5],
}
SEMILINEAR = ("hjb", "bsb")


@dataclass
class ExperimentConfig:
    """One method x (dim, T, h, N, seed) grid on a canonical PDE.

    For the semilinear PDEs ``times`` are terminal horizons and the solution
    is evaluated at t = 0; for the linear PDEs they are evaluation times.
    Points in ``x_points`` may be scalars (broadcast to every coordinate).
    """
    experiment: str = "experiment"
    pde: str = "fp_ou"
    methods: list = field(default_factory=lambda: ["direct", "girsanov", "analytic"])
    dims: list = field(default_factory=lambda: [1, 2, 10])
    times: list = field(default_factory=lambda: [0.1, 0.25, 0.5])
    h: list = field(default_factory=lambda: [0.01])
    n_paths: list = field(default_factory=lambda: [1000, 4000, 16000])
    seeds: list = field(default_factory=lambda: [0])
    x_points: list | None = None
    pde_params: dict = field(default_factory=dict)
    ngo_checkpoint: str | None = None
    oracle_cache: str | None = None
    oracle_samples: int = 1_000_000
    output_dir: str = "results"
    threads: int = 1
    timing_repeats: int = 5
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        for name in ("dims", "times", "h", "n_paths", "seeds"):
            value = getattr(self, name)
            if not isinstance(value, (list, tuple)):
                setattr(self, name, [value])
        self.methods = [METHOD_ALIASES.get(str(m).lower(), str(m).lower()) for m in self.methods]

    def validate(self):
        if not self.methods:
            raise ConfigurationError("at least one method is required")
        unknown = sorted(set(self.methods) - set(METHODS))
        if unknown:
            raise ConfigurationError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if self.pde.lower() not in CANONICAL:
            raise ConfigurationError(f"unknown PDE {self.pde!r}; choose from {sorted(CANONICAL)}")
        for name in ("dims", "times", "h", "n_paths", "seeds"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name} must be non-empty")
        if any(d < 1 for d in self.dims) or any(n < 2 for n in self.n_paths):
            raise ConfigurationError("dims must be >= 1 and n_paths >= 2")
        if any(hh <= 0 for hh in self.h) or any(t <= 0 for t in self.times):
            raise ConfigurationError("h and times must be positive")
        if self.timing_repeats < 1:
            raise ConfigurationError("timing_repeats must be >= 1")
        if "ngo" in self.methods:
            if not self.ngo_checkpoint:
                raise ConfigurationError("method ngo needs ngo_checkpoint")
            if not self.resolve(self.ngo_checkpoint).exists():
                raise MissingArtifactError(f"checkpoint {self.resolve(self.ngo_checkpoint)} not found")
        return self

    def resolve(self, path):
        """Paths in a config are relative to the config file."""
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def points(self, dim):
        pts = DEFAULT_X[self.pde.lower()] if self.x_points is None else self.x_points
        return [np.broadcast_to(np.asarray(p, dtype=np.float64), (dim,)).copy() for p in pts]

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, d, base_dir="."):
        known = {f.name for f in fields(cls)} - {"base_dir"}
        extra = sorted(set(d) - known - {"_comment"})
        if extra:
            raise ConfigurationError(f"unknown config keys {extra}")
        return cls(**{k: v for k, v in d.items() if k in known}, base_dir=str(base_dir))

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config {path} not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, base_dir=path.parent)


# --- report ---------------------------------------------------------------------

REPORT_COLUMNS = ["experiment", "method", "pde", "dim", "T", "h", "n_paths", "seed", "x",
                  "value", "std_error", "reference", "normalized_error", "wall_time_s", "error"]
VALUE_COLUMNS = ("value", "std_error", "reference", "normalized_error")
_INT = ("dim", "n_paths", "seed")
_FLOAT = ("T", "h", "value", "std_error", "reference", "normalized_error", "wall_time_s")


@dataclass
class ReportRow:
    experiment: str
    method: str
    pde: str
    dim: int
    T: float
    h: float
    n_paths: int
    seed: int
    x: str
    value: float = float("nan")
    std_error: float = float("nan")
    reference: float = float("nan")
    normalized_error: float = float("nan")
    wall_time_s: float = float("nan")
    error: str = ""


@dataclass
class Report:
    rows: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(f"# schema={SCHEMA}\n")
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(getattr(row, c)) for c in REPORT_COLUMNS])
        return path

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"schema": SCHEMA, "environment": self.environment,
                                    "summary": self.summary}, indent=2, default=_json_default))
        return path


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def read_report_csv(path):
    """Parse a ``report/v1`` CSV back into rows (floats round-trip exactly via repr)."""
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema={SCHEMA}":
            raise ConfigurationError(f"unsupported report schema line {first!r}")
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ConfigurationError("report columns do not match the v1 schema")
        rows = []
        for rec in reader:
            kw = {}
            for c in REPORT_COLUMNS:
                v = rec[c]
                kw[c] = int(v) if c in _INT else float(v) if c in _FLOAT else v
            rows.append(ReportRow(**kw))
    return Report(rows)


def environment_stamp(threads):
    return {"version": __version__, "threads": threads, "python": platform.python_version(),
            "numpy": np.__version__}


# --- execution ---------------------------------------------------------------------

def loglog_slope(hs, errors):
    """Least-squares slope of log(error) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if hs.size < 2 or np.any(errors <= 0):
        return float("nan")
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


def _bundles(cfg, dim, n_paths, seed, horizon):
    """Bundles keyed by h.  Dyadic h sweeps share one fine bundle (same Brownian paths)."""
    hs = sorted(set(float(x) for x in cfg.h))
    finest = hs[0]
    ratios = [hh / finest for hh in hs]
    nested = all(abs(r - round(r)) < 1e-9 for r in ratios)
    fine_steps = int(np.ceil(horizon / finest - 1e-9))
    if nested:
        lcm = int(np.lcm.reduce([int(round(r)) for r in ratios]))
        fine_steps = int(np.ceil(fine_steps / lcm) * lcm)
        fine = sample_bundle(seed, dim, n_paths, TimeGrid(0.0, finest, fine_steps),
                             threads=cfg.threads)
        return {hh: fine.coarsened(int(round(hh / finest))) for hh in hs}
    return {hh: sample_bundle(seed, dim, n_paths,
                              TimeGrid(0.0, hh, int(np.ceil(horizon / hh - 1e-9))),
                              threads=cfg.threads) for hh in hs}


def _solve(method, pde, t_eval, x, bundle, model, cache):
    problem = pde.problem
    if method == "direct":
        if problem.kind == "semilinear":
            return solve_semilinear_reference(problem, t_eval, x, bundle, "direct")
        return feynman_kac_direct(problem, t_eval, x, bundle)
    if method == "girsanov":
        base = DriftSpec.zero(pde.dim)
        if problem.kind == "semilinear":
            return solve_semilinear_reference(problem, t_eval, x, bundle, "girsanov", base)
        return feynman_kac_importance(problem, base, t_eval, x, bundle, cache)
    if method == "ngo":
        if problem.kind == "semilinear":
            return solve_semilinear_ngo(model, problem, t_eval, x, bundle)
        return solve_linear_ngo(model, problem, t_eval, x, bundle)
    raise ConfigurationError(f"unknown method {method!r}")


def _timed(fn, repeats):
    """(result of the first call, median wall time over ``repeats`` calls)."""
    times = []
    result = None
    for i in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
        if i == 0:
            result = out
    return result, float(np.median(times))


def run_experiment(cfg, write=True, log=None):
    """Execute the grid; returns a ``Report`` and optionally writes CSV and JSON files."""
    cfg.validate()
    name = cfg.pde.lower()
    model = NgoModel.load(cfg.resolve(cfg.ngo_checkpoint)) if "ngo" in cfg.methods else None
    oracle = OracleCache(cfg.resolve(cfg.oracle_cache)) if cfg.oracle_cache else None
    report = Report(environment=environment_stamp(cfg.threads))
    bundle_time = 0.0
    for dim in cfg.dims:
        for T in cfg.times:
            params = dict(cfg.pde_params)
            if name in SEMILINEAR:
                params["T"] = T
            pde = make_canonical(name, dim, **params)
            t_eval = 0.0 if name in SEMILINEAR else T
            oracle_t = t_eval
            for n_paths in cfg.n_paths:
                for seed in cfg.seeds:
                    t0 = time.perf_counter()
                    bundles = _bundles(cfg, dim, n_paths, seed, T)
                    bundle_time += time.perf_counter() - t0
                    cache = BaseEnsembleCache()
                    for hh, bundle in bundles.items():
                        for x in cfg.points(dim):
                            try:
                                ref = float(analytic_solution(pde, oracle_t, x, oracle,
                                                              n_samples=cfg.oracle_samples))
                                ref_error = ""
                            except (ParabolicMCError, FloatingPointError) as exc:
                                ref, ref_error = float("nan"), f"oracle {type(exc).__name__}: {exc}"
                            for method in cfg.methods:
                                row = ReportRow(cfg.experiment, method, pde.id, dim, float(T),
                                                float(hh), n_paths, seed,
                                                " ".join(repr(float(v)) for v in x),
                                                reference=ref, error=ref_error)
                                if ref_error:
                                    report.rows.append(row)
                                    continue
                                try:
                                    if method == "analytic":
                                        value, wall = _timed(lambda: ref, 1)
                                        row.value, row.std_error = float(value), 0.0
                                    else:
                                        est, wall = _timed(
                                            lambda: _solve(method, pde, t_eval, x, bundle, model,
                                                           cache), cfg.timing_repeats)
                                        row.value, row.std_error = est.value, est.std_error
                                    row.wall_time_s = wall
                                    row.normalized_error = abs(row.value - ref) / abs(ref) \
                                        if ref != 0 else abs(row.value)
                                except (ParabolicMCError, FloatingPointError) as exc:
                                    row.error = f"{type(exc).__name__}: {exc}"
                                report.rows.append(row)
                                if log:
                                    log(row)
    report.summary = summarize_rows(report.rows)
    report.summary["bundle_time_s"] = bundle_time
    report.summary["config"] = cfg.to_dict()
    if write:
        out = cfg.resolve(cfg.output_dir)
        report.write_csv(out / f"{cfg.experiment}.csv")
        report.write_json(out / f"{cfg.experiment}.json")
    return report


def summarize_rows(rows):
    """Per-method aggregate normalized errors, plus error-vs-h slopes for h sweeps."""
    groups = {}
    for r in rows:
        if r.error:
            continue
        groups.setdefault((r.method, r.pde, r.dim, r.T, r.h, r.n_paths), []).append(r)
    cells = []
    for (method, pde, dim, T, hh, n), rs in sorted(groups.items()):
        err = normalized_error([r.value for r in rs], [r.reference for r in rs]) \
            if any(r.reference != 0 for r in rs) else 0.0
        cells.append({"method": method, "pde": pde, "dim": dim, "T": T, "h": hh, "n_paths": n,
                      "normalized_error": err, "median_wall_time_s":
                      float(np.median([r.wall_time_s for r in rs]))})
    per_method = {}
    for c in cells:
        per_method.setdefault(c["method"], []).append(c["normalized_error"])
    slopes = []
    sweep = {}
    for c in cells:
        sweep.setdefault((c["method"], c["pde"], c["dim"], c["T"], c["n_paths"]), []).append(c)
    for (method, pde, dim, T, n), cs in sorted(sweep.items()):
        if len(cs) > 1 and method != "analytic":
            slopes.append({"method": method, "pde": pde, "dim": dim, "T": T, "n_paths": n,
                           "h": [c["h"] for c in cs],
                           "normalized_error": [c["normalized_error"] for c in cs],
                           "loglog_slope": loglog_slope([c["h"] for c in cs],
                                                        [c["normalized_error"] for c in cs])})
    return {"cells": cells,
            "methods": {m: float(np.mean(v)) for m, v in per_method.items()},
            "h_sweeps": slopes,
            "n_errors": sum(1 for r in rows if r.error)}
