"""Queueing simulation of each policy over an arrival-rate grid, plus the
single-tier Erlang-C validation points."""

from __future__ import annotations

import argparse
from pathlib import Path

from tierroute.cascade import Policy
from tierroute.config import RunConfig
from tierroute.experiment import build_pipeline
from tierroute.latency import (LoadProfile, erlang_c_wait, simulate_load, simulate_mmc,
                               write_latency_csv)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rates", type=float, nargs="+",
                    default=[1000, 2000, 5000, 10000, 20000])
    ap.add_argument("--duration", type=float, default=300.0)
    ap.add_argument("--out", type=Path, default=Path("runs/latency"))
    ap.add_argument("--oracle-jobs", type=int, default=1_000_000)
    args = ap.parse_args()

    for rho in (0.3, 0.7, 0.9):
        s = simulate_mmc(4, 4 * rho, 1.0, args.oracle_jobs, seed=args.seed)
        _, wait = erlang_c_wait(4, 4 * rho, 1.0)
        print(f"M/M/4 rho={rho}: simulated wait {s.mean_wait:.4f} vs Erlang C {wait:.4f}")

    pipe = build_pipeline(RunConfig(seed=args.seed))
    stats = []
    for rate in args.rates:
        for policy in Policy:
            s = simulate_load(policy, pipe.test_set, pipe.portfolio, pipe.tasks,
                              LoadProfile(rate, args.duration, args.duration / 10),
                              seed=args.seed, router=pipe.router, thresholds=pipe.thresholds)
            stats.append(s)
            flag = " unstable" if s.unstable else ""
            print(f"{rate:>7g}/min {policy.value:<11} p50 {s.p50_ms:8.1f} ms "
                  f"p99 {s.p99_ms:9.1f} ms{flag}")
    args.out.mkdir(parents=True, exist_ok=True)
    write_latency_csv(stats, args.out / "latency_sweep.csv")


if __name__ == "__main__":
    main()
