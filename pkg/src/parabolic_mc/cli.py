"""Command-line interface: ``parabolic-mc <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .bench import ExperimentConfig, run_experiment
from .elbo_meta import MetaConfig
from .errors import ConfigurationError, MissingArtifactError, ParabolicMCError
from .experiments import meta_prior_comparison
from .girsanov_fk import (feynman_kac_direct, feynman_kac_importance,
                          solve_semilinear_reference)
from .ngo import (NgoModel, TrainConfig, build_ngo, evaluate_ngo, held_out_tasks, solve_linear_ngo,
                  solve_semilinear_ngo, train_ngo, write_model_card)
from .pde_zoo import CANONICAL, OracleCache, analytic_solution, make_canonical, semi_analytic
from .rng_paths import BrownianBundle, TimeGrid, sample_bundle
from .sde_sim import DriftSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4


def _load_config(args):
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise MissingArtifactError(f"config {path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None


def _out_dir(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(obj):
    print(json.dumps(obj, indent=2, default=lambda o: o.item() if hasattr(o, "item") else str(o)))


def _merge(dataclass_type, base, overrides):
    """Build a dataclass from config keys, then CLI overrides that are not None."""
    names = {f.name for f in fields(dataclass_type)}
    unknown = sorted(set(base) - names - {"_comment"})
    if unknown:
        raise ConfigurationError(f"unknown config keys {unknown}")
    kw = {k: v for k, v in base.items() if k in names}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    for k in ("x_box", "t_range", "eval_times", "lr_milestones"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return dataclass_type(**kw)


# --- subcommands --------------------------------------------------------------------

def cmd_bundle(args):
    if args.describe:
        path = Path(args.describe)
        if not path.exists():
            raise MissingArtifactError(f"bundle descriptor {path} not found")
        b = BrownianBundle.from_json(path.read_text(), threads=args.threads)
        _emit({**b.descriptor(), "mean_increment": float(b.increments.mean()),
               "var_over_h": float(b.increments.var() / b.h)})
        return EXIT_OK
    grid = TimeGrid.from_horizon(args.T, args.h)
    b = sample_bundle(args.seed, args.dim, args.n_paths, grid, antithetic=args.antithetic,
                      threads=args.threads)
    path = _out_dir(args) / (args.name or f"bundle_d{args.dim}_n{args.n_paths}_s{args.seed}.json")
    path.write_text(b.to_json())
    _emit({"descriptor": str(path), **b.descriptor()})
    return EXIT_OK


def _pde_params(args, cfg):
    params = dict(cfg.get("pde_params", {}))
    if args.T is not None and args.pde in ("hjb", "bsb"):
        params["T"] = args.T
    return params


def cmd_solve(args):
    cfg = _load_config(args)
    pde = make_canonical(args.pde, args.dim, **_pde_params(args, cfg))
    x = np.broadcast_to(np.asarray(args.x, dtype=np.float64), (args.dim,)) if len(args.x) == 1 \
        else np.asarray(args.x, dtype=np.float64)
    t = args.t
    if args.method == "analytic":
        cache = OracleCache(args.oracle_cache) if args.oracle_cache else None
        value = analytic_solution(pde, t, x, cache)
        se = semi_analytic(pde, t, x)[1] if pde.id in ("FP_OU", "BSB") else None
        print(f"{value:.5f}")
        if args.verbose:
            _emit({"pde": pde.id, "t": t, "x": x.tolist(), "value": value, "std_error": se})
        return EXIT_OK
    problem = pde.problem
    duration = (problem.horizon - t) if problem.kind == "semilinear" else t
    bundle = sample_bundle(args.seed, args.dim, args.n_paths,
                           TimeGrid.from_horizon(max(duration, args.h), args.h),
                           threads=args.threads)
    zero = DriftSpec.zero(args.dim)
    if args.method == "direct":
        est = (solve_semilinear_reference(problem, t, x, bundle) if problem.kind == "semilinear"
               else feynman_kac_direct(problem, t, x, bundle))
    elif args.method == "girsanov":
        est = (solve_semilinear_reference(problem, t, x, bundle, "girsanov", zero)
               if problem.kind == "semilinear"
               else feynman_kac_importance(problem, zero, t, x, bundle))
    else:
        if not args.checkpoint:
            raise ConfigurationError("--method ngo needs --checkpoint")
        model = NgoModel.load(args.checkpoint)
        est = (solve_semilinear_ngo(model, problem, t, x, bundle) if problem.kind == "semilinear"
               else solve_linear_ngo(model, problem, t, x, bundle))
    print(f"{est.value:.5f}")
    _emit({"pde": pde.id, "method": est.method, "t": t, "x": x.tolist(), "value": est.value,
           "std_error": est.std_error, "n_paths": est.n_paths, "wall_time": est.wall_time,
           "ess": est.ess, "n_clamped": est.n_clamped})
    return EXIT_OK


def cmd_train_ngo(args):
    base = _load_config(args)
    cfg = _merge(TrainConfig, base, {"dim": args.dim, "family": args.family, "epochs": args.epochs,
                                     "n_paths": args.n_paths, "lr": args.lr, "seed": args.seed,
                                     "width": args.width, "n_hidden": args.n_hidden})
    model = build_ngo(cfg.dim, cfg.width, cfg.n_hidden, cfg.kernel, seed=cfg.seed)
    model, history = train_ngo(cfg, bundle_seed=cfg.seed, model=model,
                               log_every=args.log_every or 0)
    out = _out_dir(args)
    stem = args.name or f"ngo_{cfg.family}_d{cfg.dim}"
    err = None
    if args.eval_tasks:
        tasks = held_out_tasks(cfg.family, cfg.dim, args.eval_tasks, cfg.eval_times, cfg.x_box,
                               cfg.h, seed=cfg.seed + 1000, reference_paths=cfg.reference_paths)
        err = evaluate_ngo(model, tasks, cfg.eval_paths, cfg.h, seed=cfg.seed + 2000)
    card = write_model_card(out / f"{stem}.card.json", model, cfg, err,
                            {"iterations": len(history)})
    model.card.update(card)
    model.save(out / f"{stem}.json")
    _emit({"checkpoint": str(out / f"{stem}.json"), "iterations": len(history),
           "final_loss": history[-1] if history else None, "held_out_normalized_error": err})
    return EXIT_OK


def cmd_eval_ngo(args):
    model = NgoModel.load(args.checkpoint)
    tc = model.card.get("train_config", {})
    family = args.family or tc.get("family", "polynomial")
    h = args.h or tc.get("h", 0.005)
    x_box = tuple(tc.get("x_box", (0.1, 0.6)))
    tasks = held_out_tasks(family, model.dim, args.n_tasks, tuple(args.times), x_box, h,
                           seed=args.seed, reference_paths=args.reference_paths)
    err = evaluate_ngo(model, tasks, args.n_paths, h, seed=args.seed + 1)
    _emit({"checkpoint": args.checkpoint, "family": family, "n_tasks": args.n_tasks,
           "held_out_normalized_error": err})
    return EXIT_OK


def cmd_elbo_train(args):
    base = _load_config(args)
    meta_keys = {f.name for f in fields(MetaConfig)}
    cfg = _merge(MetaConfig, {k: v for k, v in base.items() if k in meta_keys},
                 {"epochs": args.epochs, "lr": args.lr, "seed": args.seed,
                  "n_paths": args.n_paths})
    n_tasks = base.get("n_tasks", args.n_tasks)
    summary, res = meta_prior_comparison(
        cfg, n_tasks=n_tasks, n_samples=base.get("samples_per_task", 60),
        n_held_out=args.held_out, width=base.get("drift_width", 16),
        shot_epochs=base.get("few_shot_epochs", 5), eval_paths=base.get("eval_paths", 64))
    out = _out_dir(args)
    np.savetxt(out / "elbo_curves.csv", res.curves, delimiter=",",
               header=",".join(f"task{i}" for i in range(n_tasks)), comments="")
    (out / "elbo_summary.json").write_text(json.dumps(summary, indent=2))
    _emit(summary)
    return EXIT_OK


def cmd_bench(args):
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig()
    if args.methods is not None:
        cfg.methods = [m for m in args.methods.split(",") if m]
        cfg.__post_init__()
    if args.out_dir_set:
        cfg.output_dir = str(Path(args.out_dir).resolve())
    if args.seed_set:
        cfg.seeds = [args.seed]
    cfg.threads = args.threads
    report = run_experiment(cfg)
    _emit({"rows": len(report.rows), "summary": {k: v for k, v in report.summary.items()
                                                  if k != "config"}})
    return EXIT_OK


def cmd_oracle(args):
    pde = make_canonical(args.pde, args.dim, **_pde_params(args, _load_config(args)))
    cache = OracleCache(_out_dir(args) / "oracle_cache")
    rows = []
    for x in args.x:
        point = np.full(args.dim, float(x))
        value, se = cache.get(pde, args.t, point, args.n_samples, args.seed)
        rows.append({"x": float(x), "value": value, "std_error": se})
    _emit({"pde": pde.id, "t": args.t, "cache": str(cache.directory), "rows": rows})
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------

class _Tracked(argparse.Action):
    """Record whether a global flag was given explicitly."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        setattr(namespace, f"{self.dest}_set", True)


def build_parser():
    parser = argparse.ArgumentParser(prog="parabolic-mc", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config path")
    parser.add_argument("--seed", type=int, default=0, action=_Tracked)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out-dir", default="results", action=_Tracked)
    parser.set_defaults(seed_set=False, out_dir_set=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bundle", help="create or describe a Brownian bundle")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--n-paths", type=int, default=1000)
    p.add_argument("--T", type=float, default=0.5)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--antithetic", action="store_true")
    p.add_argument("--name")
    p.add_argument("--describe", metavar="DESCRIPTOR", help="describe an existing bundle file")
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("solve", help="solve one canonical PDE at one point")
    p.add_argument("--pde", choices=sorted(CANONICAL), required=True)
    p.add_argument("--method", choices=["analytic", "direct", "girsanov", "ngo"], default="analytic")
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--x", type=float, nargs="+", default=[0.0])
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--T", type=float, help="terminal time for the semilinear PDEs")
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--n-paths", type=int, default=10000)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle-cache")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train-ngo", help="train the likelihood-ratio network")
    p.add_argument("--dim", type=int)
    p.add_argument("--family", choices=["polynomial", "linear", "constant", "zero"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--n-hidden", type=int)
    p.add_argument("--eval-tasks", type=int, default=0)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--name")
    p.set_defaults(func=cmd_train_ngo)

    p = sub.add_parser("eval-ngo", help="held-out normalized error of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--family")
    p.add_argument("--n-tasks", type=int, default=12)
    p.add_argument("--times", type=float, nargs="+", default=[0.1, 0.25, 0.5])
    p.add_argument("--h", type=float)
    p.add_argument("--n-paths", type=int, default=4000)
    p.add_argument("--reference-paths", type=int, default=100_000)
    p.set_defaults(func=cmd_eval_ngo)

    p = sub.add_parser("elbo-train", help="meta-learn a shared prior on 2d Gaussian tasks")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-paths", type=int)
    p.add_argument("--n-tasks", type=int, default=10)
    p.add_argument("--held-out", type=int, default=0, help="number of few-shot held-out tasks")
    p.set_defaults(func=cmd_elbo_train)

    p = sub.add_parser("bench", help="run an experiment grid and write CSV/JSON reports")
    p.add_argument("--methods", help="comma-separated override of the config's method list")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("oracle", help="build or refresh semi-analytic oracle caches")
    p.add_argument("--pde", choices=sorted(CANONICAL), required=True)
    p.add_argument("--dim", type=int, default=1)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--T", type=float)
    p.add_argument("--x", type=float, nargs="+", default=[0.0])
    p.add_argument("--n-samples", type=int, default=1_000_000)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParabolicMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
