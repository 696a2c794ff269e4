#!/usr/bin/env python3
"""Run the simulation studies from the command line.

Examples:
    python3 scripts/run_simstudy.py --study dwell-time
    python3 scripts/run_simstudy.py --study all --fast
    python3 scripts/run_simstudy.py --study smooth-transitions --verbose
"""

import argparse
import json
import sys

from flexhmm.simstudy import STUDIES, run_study

FAST_KWARGS = {
    "smooth-transitions": {"n_reps": 2},
    "switching-poisson": {"n_reps": 2},
    "random-effect-sd": {"n_reps": 1},
    "residual-calibration": {"n_seeds": 5},
    "interval-coverage": {"n_datasets": 10},
    "constraint-integrity": {},
    "dwell-time": {"n": 20_000},
}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument(
        "--study",
        action="append",
        required=True,
        choices=sorted(STUDIES) + ["all"],
        help="study name, repeatable; 'all' runs every study",
    )
    ap.add_argument(
        "--fast",
        action="store_true",
        help="shrink replication counts for a smoke run (thresholds may fail)",
    )
    ap.add_argument("--verbose", action="store_true", help="per-replication progress")
    ap.add_argument("--json", help="also write results to this JSON file")
    args = ap.parse_args(argv)

    names = sorted(STUDIES) if "all" in args.study else args.study
    results = []
    for name in names:
        kwargs = dict(FAST_KWARGS[name]) if args.fast else {}
        if "verbose" in STUDIES[name].__code__.co_varnames:
            kwargs["verbose"] = args.verbose
        res = run_study(name, **kwargs)
        results.append(res)
        print(res.line(), flush=True)

    if args.json:
        with open(args.json, "w") as fh:
            json.dump(
                [
                    {
                        "name": r.name,
                        "metric": r.metric,
                        "threshold": r.threshold,
                        "passed": r.passed,
                        "seconds": r.seconds,
                        "detail": r.detail,
                    }
                    for r in results
                ],
                fh,
                indent=2,
            )
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
