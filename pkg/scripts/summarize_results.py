"""Print the cached desk-scale results as markdown tables.

    python3 scripts/summarize_results.py
"""

import argparse
from pathlib import Path

from glha.experiments import SEEDS, SUITES, load_result

ROOT = Path(__file__).resolve().parent.parent / "results"


def fmt(x):
    return f"{x:.3f}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=ROOT)
    args = ap.parse_args()

    print("| hard split (10% inliers) | seed | P | R | abs(P-R) | F0.5 | F1 | F2 |")
    print("| --- | --- | --- | --- | --- | --- | --- | --- |")
    for variant in SUITES["hard"][1]:
        for seed in SEEDS:
            rec = load_result(args.out, "hard", variant, seed)
            if rec is None:
                print(f"| {variant} | {seed} | missing | | | | | |")
                continue
            s = rec["test"]["none"]
            print(f"| {variant} | {seed} | {fmt(s['P'])} | {fmt(s['R'])} | {fmt(abs(s['P'] - s['R']))} "
                  f"| {fmt(s['F0.5'])} | {fmt(s['F1'])} | {fmt(s['F2'])} |")

    print()
    print("| cascade split (30% inliers) | seed | P stage 1 | P final | R final | F1 | mAP@5 +RANSAC | mAP@5 raw RANSAC |")
    print("| --- | --- | --- | --- | --- | --- | --- | --- |")
    for variant in SUITES["cascade"][1]:
        for seed in SEEDS:
            rec = load_result(args.out, "cascade", variant, seed)
            if rec is None:
                print(f"| {variant} | {seed} | missing | | | | | |")
                continue
            s = rec["test"]["weighted8pt"]
            first = s.get("stage1", s["final"])["P"]
            print(f"| {variant} | {seed} | {fmt(first)} | {fmt(s['final']['P'])} | {fmt(s['final']['R'])} "
                  f"| {fmt(s['F1'])} | {fmt(rec['test']['ransac']['mAP@5'])} "
                  f"| {fmt(rec['test']['raw_ransac']['mAP@5'])} |")


if __name__ == "__main__":
    main()
