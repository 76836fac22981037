"""Per-cell conformal coverage: 500 calibration and 10,000 test queries per
(tier, task) cell, averaged over seeds."""

from __future__ import annotations

import argparse

import numpy as np

from tierroute.config import RunConfig, load_config
from tierroute.experiment import cell_coverage


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--alpha", type=float, default=None)
    args = ap.parse_args()

    config = load_config(args.config) if args.config else RunConfig()
    runs = [cell_coverage(config, s, alpha=args.alpha) for s in range(args.seeds)]
    print("tier task mean_rate max_rate")
    for cell in sorted(runs[0]):
        rates = [r[cell] for r in runs]
        print(f"{cell[0]:>4} {cell[1]:>4} {np.mean(rates):9.4f} {np.max(rates):8.4f}")


if __name__ == "__main__":
    main()
