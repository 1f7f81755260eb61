"""Named, reproducible NGO training runs described by JSON files.

A linear recipe holds a ``train`` block (TrainConfig fields) and an optional
``eval`` block for the held-out error.  A semilinear recipe names a canonical
PDE and fits the gradient network to oracle values at sampled (t, x) points.
Keys starting with an underscore are annotations and are ignored.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, MissingArtifactError
from .ngo import (NgoModel, TrainConfig, build_ngo, evaluate_ngo, held_out_tasks, train_grad_net,
                  train_ngo)
from .pde_zoo import make_canonical, semi_analytic

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


@dataclass
class TrainedNgo:
    model: NgoModel
    h: float
    history: list
    held_out_error: float | None = None
    untrained_error: float | None = None
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


def _strip(doc):
    if isinstance(doc, dict):
        return {k: _strip(v) for k, v in doc.items() if not k.startswith("_")}
    return doc


def load_recipe(name_or_path):
    """Recipe dict from a path or from ``configs/<name>.json``."""
    path = Path(name_or_path)
    if not path.suffix:
        path = CONFIG_DIR / f"{name_or_path}.json"
    if not path.exists():
        raise MissingArtifactError(f"recipe not found: {path}")
    try:
        return _strip(json.loads(path.read_text()))
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: {err}") from None


def _train_config(block):
    block = dict(block)
    for key in ("x_box", "t_range", "eval_times", "lr_milestones"):
        if key in block:
            block[key] = tuple(block[key])
    try:
        return TrainConfig(**block)
    except TypeError as err:
        raise ConfigurationError(str(err)) from None


def train_linear_recipe(recipe):
    """Train the expmart network; held-out errors of the untrained and trained model if asked."""
    cfg = _train_config(recipe["train"])
    started = time.perf_counter()
    model = build_ngo(cfg.dim, cfg.width, cfg.n_hidden, cfg.kernel, seed=cfg.seed)
    ev = recipe.get("eval")
    tasks = untrained = None
    if ev:
        tasks = held_out_tasks(cfg.family, cfg.dim, ev["n_tasks"], tuple(ev["times"]),
                               tuple(ev.get("x_box", cfg.x_box)), cfg.h, seed=ev["seed"],
                               reference_paths=ev["reference_paths"])
        untrained = evaluate_ngo(model, tasks, ev["n_paths"], cfg.h, seed=ev["seed"] + 1)
    model, history = train_ngo(cfg, bundle_seed=recipe.get("bundle_seed", cfg.seed), model=model)
    err = evaluate_ngo(model, tasks, ev["n_paths"], cfg.h, seed=ev["seed"] + 1) if ev else None
    model.card.update({"drift_family": cfg.family, "held_out_normalized_error": err,
                       "untrained_normalized_error": untrained})
    return TrainedNgo(model, cfg.h, history, err, untrained, time.perf_counter() - started)


def _sample_points(pde, spec, seed):
    rng = np.random.default_rng(seed)
    lo, hi = spec["x_box"]
    return [(float(t), rng.uniform(lo, hi, pde.dim))
            for t in spec["times"] for _ in range(spec["per_time"])]


def train_semilinear_recipe(recipe):
    """Fit the gradient network so backward-scheme estimates reproduce oracle values."""
    pde = make_canonical(recipe["pde"], recipe["dim"])
    started = time.perf_counter()
    points = _sample_points(pde, recipe["points"], recipe.get("seed", 0))
    targets = [semi_analytic(pde, t, x, n_samples=recipe.get("oracle_samples", 100_000))[0]
               for t, x in points]
    net = recipe.get("network", {})
    model = build_ngo(pde.dim, width=net.get("width", 16), n_hidden=net.get("n_hidden", 1),
                      semilinear=True, grad_width=net.get("grad_width"),
                      grad_hidden=net.get("grad_hidden", 5), seed=recipe.get("seed", 0))
    fit = recipe["fit"]
    model, history = train_grad_net(model, pde.problem, points, targets,
                                    bundle_seed=fit.get("bundle_seed", 1), n_paths=fit["n_paths"],
                                    h=fit["h"], iterations=fit["iterations"], lr=fit["lr"],
                                    seed=recipe.get("seed", 0))
    model.card.update({"pde": pde.id, "fit": fit, "n_points": len(points)})
    return TrainedNgo(model, fit["h"], history, wall_time=time.perf_counter() - started,
                      extra={"points": points, "targets": targets})


def train_recipe(name_or_path):
    recipe = load_recipe(name_or_path)
    kind = recipe.get("kind", "linear")
    if kind == "linear":
        return train_linear_recipe(recipe)
    if kind == "semilinear":
        return train_semilinear_recipe(recipe)
    raise ConfigurationError(f"unknown recipe kind {kind!r}")
