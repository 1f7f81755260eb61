"""Run acceptance criteria outside pytest and print one PASS/FAIL line each.

    python3 scripts/run_acceptance.py            # all criteria
    python3 scripts/run_acceptance.py 2 6 7      # a subset
"""
import argparse
import json
import sys

from parabolic_mc import experiments as ex

RUNNERS = {
    1: ex.martingale_suite,
    2: ex.importance_vs_direct,
    3: ex.weak_order,
    4: ex.canonical_accuracy,
    5: ex.ngo_polynomial_table,
    6: ex.uniform_convergence,
    7: ex.gradient_integrity,
    8: ex.meta_directionality,
}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("criteria", type=int, nargs="*", default=sorted(RUNNERS))
    parser.add_argument("--json", help="also write the results to this file")
    args = parser.parse_args(argv)
    unknown = sorted(set(args.criteria) - set(RUNNERS))
    if unknown:
        parser.error(f"unknown criteria {unknown}")
    results = []
    for k in args.criteria:
        result = RUNNERS[k]()
        print(result.line(), flush=True)
        results.append(result)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([{"name": r.name, "passed": r.passed, "summary": r.summary,
                        "wall_time": r.wall_time, "time_limit": r.time_limit} for r in results],
                      fh, indent=2)
    return 0 if all(r.passed and r.within_time for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
