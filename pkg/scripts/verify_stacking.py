#!/usr/bin/env python3
"""Recompute stacked probabilities from a saved run, independently of the package.

Reads ``meta.json`` (coefficients, intercept, model order) and ``level0_test.csv``
from a ``runs/<run_id>/stacked`` directory, evaluates sigmoid(w.x + b) with plain
``math.exp`` and compares against ``stacked_test.csv``. Only the standard library
is used. Exit status 0 when the largest absolute difference is below ``--tol``.
"""
import argparse
import csv
import json
import math
import sys
from pathlib import Path


def logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def recompute(stacked_dir: Path) -> dict[str, float]:
    meta = json.loads((stacked_dir / "meta.json").read_text())
    weights = dict(zip(meta["model_order"], meta["coefficients"]))
    out = {}
    with open(stacked_dir / "level0_test.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            z = meta["intercept"] + sum(w * float(row[name]) for name, w in weights.items())
            out[row["sample_id"]] = logistic(z)
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("stacked_dir", type=Path, help="runs/<run_id>/stacked")
    ap.add_argument("--tol", type=float, default=1e-9)
    args = ap.parse_args(argv)

    expected = recompute(args.stacked_dir)
    with open(args.stacked_dir / "stacked_test.csv", newline="") as fh:
        saved = {row["sample_id"]: float(row["probability"]) for row in csv.DictReader(fh)}
    if set(saved) != set(expected):
        print("sample ids differ between level0_test.csv and stacked_test.csv")
        return 1
    worst = max(abs(saved[k] - expected[k]) for k in saved)
    print(f"{len(saved)} samples, max |difference| = {worst:.3e} (tolerance {args.tol:g})")
    return 0 if worst < args.tol else 1


if __name__ == "__main__":
    sys.exit(main())
