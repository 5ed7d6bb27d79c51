#!/usr/bin/env python3
"""Recompute summary.csv from the per-method metrics files and compare.

Stdlib only, independent of the package: a second implementation of the
mean/std aggregation used to cross-check the emitted summary to 1e-12.

Usage: recompute_summary.py <metrics-dir>
"""

import csv
import math
import sys
from pathlib import Path

TOLERANCE = 1e-12


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mean(xs):
    return sum(xs) / len(xs)


def pstd(xs):
    m = mean(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def recompute(metrics_dir: Path):
    groups = {}  # (method, round) -> list of row dicts
    order = []
    for path in sorted(metrics_dir.glob("metrics_*.csv")):
        for row in read_rows(path):
            key = (row["method"], int(row["round"]))
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row)
    out = {}
    for key in order:
        rows = groups[key]
        losses = [float(r["train_loss"]) for r in rows]
        accs = [float(r["test_accuracy"]) for r in rows]
        eps = [r["epsilon_hat"] for r in rows]
        has_eps = all(e != "" for e in eps)
        out[key] = {
            "num_seeds": len(rows),
            "train_loss_mean": mean(losses),
            "train_loss_std": pstd(losses),
            "test_accuracy_mean": mean(accs),
            "test_accuracy_std": pstd(accs),
            "epsilon_hat_mean": mean([float(e) for e in eps]) if has_eps else None,
            "epsilon_hat_std": pstd([float(e) for e in eps]) if has_eps else None,
        }
    return out


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__.strip(), file=sys.stderr)
        return 2
    metrics_dir = Path(sys.argv[1])
    summary_path = metrics_dir / "summary.csv"
    if not summary_path.is_file():
        print(f"error: {summary_path} not found", file=sys.stderr)
        return 2
    expected = recompute(metrics_dir)
    checked = 0
    worst = 0.0
    for row in read_rows(summary_path):
        key = (row["method"], int(row["round"]))
        if key not in expected:
            print(f"error: summary row {key} has no per-seed backing", file=sys.stderr)
            return 1
        mine = expected[key]
        if int(row["num_seeds"]) != mine["num_seeds"]:
            print(f"error: {key} num_seeds {row['num_seeds']} != {mine['num_seeds']}",
                  file=sys.stderr)
            return 1
        for col in ("train_loss_mean", "train_loss_std",
                    "test_accuracy_mean", "test_accuracy_std",
                    "epsilon_hat_mean", "epsilon_hat_std"):
            theirs = float(row[col]) if row[col] != "" else None
            ours = mine[col]
            if (theirs is None) != (ours is None):
                print(f"error: {key} {col}: {theirs!r} vs {ours!r}", file=sys.stderr)
                return 1
            if theirs is not None:
                gap = abs(theirs - ours)
                worst = max(worst, gap)
                if gap > TOLERANCE:
                    print(f"error: {key} {col} differs by {gap:.3e}", file=sys.stderr)
                    return 1
        checked += 1
    if checked == 0:
        print("error: summary.csv has no data rows", file=sys.stderr)
        return 1
    print(f"ok: {checked} summary rows match the per-seed files "
          f"(worst abs gap {worst:.3e}, tolerance {TOLERANCE:.0e})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
