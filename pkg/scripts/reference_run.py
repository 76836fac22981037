"""Train, calibrate and evaluate every policy on one seeded config; print the
quality/cost table and write metrics JSON per policy."""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from tierroute.cascade import Policy, write_metrics_json
from tierroute.config import load_config
from tierroute.experiment import build_pipeline


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/reference"))
    args = ap.parse_args()

    config = replace(load_config(args.config), seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    pipe = build_pipeline(config)
    print(f"{'policy':<12} {'quality':>8} {'cost':>8} {'T1+T2':>6} {'viol':>7}")
    for policy in Policy:
        m = pipe.run(policy)
        write_metrics_json(m, args.out / f"metrics_{policy.value}.json")
        print(f"{policy.value:<12} {m.quality_ratio:8.4f} {m.cost_ratio:8.4f} "
              f"{m.cheap_share:6.3f} {m.coverage_violation_rate:7.4f}")


if __name__ == "__main__":
    main()
