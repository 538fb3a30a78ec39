"""Train and evaluate the desk-scale trend experiments, caching one JSON per run.

    python3 scripts/run_mirrors.py --suite hard --seeds 0 1 2
    python3 scripts/run_mirrors.py --suite all

Cached runs whose settings still match are skipped unless --force is given.
"""

import argparse
import logging
import time
from pathlib import Path

from glha.experiments import SEEDS, SUITES, run_cached

ROOT = Path(__file__).resolve().parent.parent / "results"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suite", choices=[*SUITES, "all"], default="all")
    ap.add_argument("--variants", nargs="*", help="subset of the suite's variants")
    ap.add_argument("--seeds", nargs="*", type=int, default=list(SEEDS))
    ap.add_argument("--out", type=Path, default=ROOT)
    ap.add_argument("--force", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    suites = list(SUITES) if args.suite == "all" else [args.suite]
    for seed in args.seeds:
        for suite in suites:
            for variant in args.variants or SUITES[suite][1]:
                t0 = time.perf_counter()
                rec = run_cached(args.out, suite, variant, seed, args.force)
                final = rec["test"].get("none") or rec["test"]["ransac"]
                print(f"{suite:8s} {variant:12s} seed {seed}  P {final['P']:.3f} R {final['R']:.3f} "
                      f"F1 {final['F1']:.3f}  ({time.perf_counter() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
