"""Train a named recipe from configs/ and save the checkpoint with its card.

    python3 scripts/train_recipe.py ngo_polynomial_1d --out-dir results/models
"""
import argparse
import json
import sys
from pathlib import Path

from parabolic_mc.recipes import train_recipe


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("recipe", help="recipe name in configs/ or a JSON path")
    parser.add_argument("--out-dir", default="results/models")
    args = parser.parse_args(argv)
    trained = train_recipe(args.recipe)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.recipe).stem
    trained.model.card["wall_time_s"] = trained.wall_time
    trained.model.save(out / f"{stem}.json")
    summary = {"checkpoint": str(out / f"{stem}.json"), "wall_time_s": round(trained.wall_time, 1),
               "final_loss": trained.history[-1] if trained.history else None,
               "held_out_normalized_error": trained.held_out_error,
               "untrained_normalized_error": trained.untrained_error}
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
