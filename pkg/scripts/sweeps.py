"""Sensitivity sweeps of the routed policy: alpha, threshold scale, loss
weights, frontier cost multiplier and difficulty shift. One CSV per sweep."""

from __future__ import annotations

import argparse
import csv
from pathlib import Path

from tierroute.config import RunConfig, load_config
from tierroute.experiment import SHARED_PIPELINE, SWEEP_COLUMNS, build_pipeline, sweep_point

GRID = {
    "alpha": [0.01, 0.03, 0.05, 0.10, 0.15],
    "tau_scale": [0.90, 0.95, 1.00, 1.05, 1.10],
    "lambda_cost": [0.0, 0.1, 0.3, 0.5, 1.0],
    "lambda_quality": [0.0, 0.25, 0.5, 0.75, 1.0],
    "cost_ratio": [50, 100, 200, 400, 800],
    "shift": [0.0, 0.05, 0.10, 0.20, 0.30],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--out", type=Path, default=Path("runs/sweeps"))
    ap.add_argument("--only", choices=sorted(GRID))
    args = ap.parse_args()

    config = load_config(args.config) if args.config else RunConfig()
    args.out.mkdir(parents=True, exist_ok=True)
    shared = build_pipeline(config)
    for name, values in GRID.items():
        if args.only and name != args.only:
            continue
        pipe = shared if name in SHARED_PIPELINE else None
        rows = [sweep_point(config, name, v, pipe) for v in values]
        cols = SWEEP_COLUMNS[name]
        with open(args.out / f"sweep_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            w.writerows([[f"{r[c]:.6f}" for c in cols] for r in rows])
        print(name, " ".join(f"{r[cols[0]]:g}:{r['cost_ratio']:.3f}" for r in rows))


if __name__ == "__main__":
    main()
