"""Command-line driver: `python -m tierroute <subcommand> --config run.yaml`.

Subcommands read and write plain-text artifacts in the output directory, so a
later stage refuses to start until the stage it depends on has run. Every
artifact is a pure function of (config, seed); wall-clock facts live only in
run_manifest.json.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy
import yaml

from . import __version__
from .calibration import read_thresholds_csv, write_thresholds_csv
from .cascade import Policy, run_experiment, write_metrics_json, write_traces_csv
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config
from .coopt import CooptConfig, CooptData, coopt_loop, write_history_csv
from .experiment import (SHARED_PIPELINE, SWEEP_COLUMNS, build_pipeline, build_portfolio,
                         calibrate, generate_split, sweep_point, train_router,
                         training_config, workload_config)
from .latency import LoadProfile, QueueStats, simulate_load, write_latency_csv
from .router import load_checkpoint, save_checkpoint
from .workload import read_workload_csv, write_workload_csv

log = logging.getLogger("tierroute")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_UNSTABLE = 0, 2, 3, 4
SPLITS = ("train", "calib", "test")
REPORT_HEADER = ["policy", "Quality Ratio", "Cost Ratio", "p99", "SLA Viol."]


class MissingArtifact(RuntimeError):
    pass


def _need(out: Path, name: str, producer: str) -> Path:
    path = out / name
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `{producer}` first")
    return path


def _policies(config: RunConfig, override: str | None) -> list[str]:
    if override is None:
        return list(config.policies)
    try:
        return [Policy(override).value]
    except ValueError:
        raise ConfigError(f"unknown policy {override!r}") from None


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- subcommands -------------------------------------------------------------------

def cmd_generate(config: RunConfig, out: Path, args) -> list[str]:
    written = []
    for split in SPLITS:
        name = f"workload_{split}.csv"
        write_workload_csv(generate_split(config, split), out / name)
        written.append(name)
    return written


def cmd_train_router(config: RunConfig, out: Path, args) -> list[str]:
    train_set = read_workload_csv(_need(out, "workload_train.csv", "generate"))
    tasks = workload_config(config).tasks
    model = train_router(config, build_portfolio(config), train_set, tasks)
    save_checkpoint(model, out / "router.txt")
    return ["router.txt"]


def cmd_calibrate(config: RunConfig, out: Path, args) -> list[str]:
    calib = read_workload_csv(_need(out, "workload_calib.csv", "generate"))
    router = load_checkpoint(_need(out, "router.txt", "train-router"))
    tasks = workload_config(config).tasks
    table = calibrate(config, build_portfolio(config), router, calib, tasks)
    write_thresholds_csv(table, out / "thresholds.csv")
    return ["thresholds.csv"]


def _load_policy_inputs(config: RunConfig, out: Path, policies: Sequence[str]):
    router = thresholds = None
    if any(p in ("routed", "no_cascade") for p in policies):
        router = load_checkpoint(_need(out, "router.txt", "train-router"))
    if "routed" in policies:
        thresholds = read_thresholds_csv(_need(out, "thresholds.csv", "calibrate"),
                                         config.calibration.alpha, config.calibration.rule)
    return router, thresholds


def cmd_simulate(config: RunConfig, out: Path, args) -> list[str]:
    policies = _policies(config, args.policy)
    test = read_workload_csv(_need(out, "workload_test.csv", "generate"))
    router, thresholds = _load_policy_inputs(config, out, policies)
    tasks, portfolio = workload_config(config).tasks, build_portfolio(config)
    written = []
    for p in policies:
        metrics, run = run_experiment(p, test, portfolio, tasks, seed=config.seed,
                                      router=router, thresholds=thresholds)
        write_metrics_json(metrics, out / f"metrics_{p}.json")
        write_traces_csv(run, out / f"traces_{p}.csv")
        written += [f"metrics_{p}.json", f"traces_{p}.csv"]
        log.info("%s: quality %.4f cost %.4f", p, metrics.quality_ratio, metrics.cost_ratio)
    return written


def cmd_coopt(config: RunConfig, out: Path, args) -> list[str]:
    data = CooptData(*(read_workload_csv(_need(out, f"workload_{s}.csv", "generate"))
                       for s in SPLITS))
    router = load_checkpoint(_need(out, "router.txt", "train-router"))
    c = config.coopt
    cfg = CooptConfig(epsilon=c.epsilon, max_iterations=c.max_iterations, eta=c.eta,
                      top_n=c.top_n, candidate_ks=c.candidate_ks,
                      hard_fraction=c.hard_fraction, replay_fraction=c.replay_fraction,
                      radius_quantile=c.radius_quantile, targeting=c.targeting)
    state, _ = coopt_loop(router, build_portfolio(config), workload_config(config).tasks,
                          data, training_config(config), cfg,
                          alpha=config.calibration.alpha, seed=config.seed)
    write_history_csv(state, out / "coopt_history.csv")
    return ["coopt_history.csv"]


def _latency_point(job) -> QueueStats:
    config, out, policy, rate = job
    test = read_workload_csv(out / "workload_test.csv")
    router, thresholds = _load_policy_inputs(config, out, [policy])
    lat = config.latency
    return simulate_load(policy, test, build_portfolio(config), workload_config(config).tasks,
                         LoadProfile(rate, lat.duration_s, lat.warmup_s), seed=config.seed,
                         router=router, thresholds=thresholds,
                         service_dist=lat.service_dist, service_sigma=lat.service_sigma)


def cmd_latency(config: RunConfig, out: Path, args) -> list[str]:
    policies = _policies(config, args.policy)
    _need(out, "workload_test.csv", "generate")
    _load_policy_inputs(config, out, policies)  # fail fast on missing upstream files
    jobs = [(config, out, p, r) for r in config.latency.arrival_rates for p in policies]
    stats = _map(_latency_point, jobs, args.jobs)
    write_latency_csv(stats, out / "latency_sweep.csv")
    unstable = [f"{s.policy}@{s.arrival_rate_per_min:g}/min" for s in stats if s.unstable]
    if unstable:
        log.warning("unstable load points: %s", ", ".join(unstable))
        args.unstable = unstable
    return ["latency_sweep.csv"]


def _sweep_job(job) -> list[dict]:
    config, parameter, values = job
    if parameter in SHARED_PIPELINE:
        pipe = build_pipeline(config)
        return [sweep_point(config, parameter, v, pipe) for v in values]
    return [sweep_point(config, parameter, values[0])]


def cmd_sweep(config: RunConfig, out: Path, args) -> list[str]:
    sweep = config.sweep
    values = list(sweep.values)
    if sweep.parameter in SHARED_PIPELINE:
        rows = _sweep_job((config, sweep.parameter, values))
    else:
        chunks = _map(_sweep_job, [(config, sweep.parameter, [v]) for v in values], args.jobs)
        rows = [r for chunk in chunks for r in chunk]
    name = f"sweep_{sweep.parameter}.csv"
    cols = SWEEP_COLUMNS[sweep.parameter]
    with open(out / name, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{r[c]:.6f}" for c in cols])
    return [name]


def cmd_report(config: RunConfig, out: Path, args) -> list[str]:
    metrics = {}
    for p in _policies(config, args.policy):
        path = _need(out, f"metrics_{p}.json", "simulate")
        metrics[p] = json.loads(path.read_text())
    lat_path = _need(out, "latency_sweep.csv", "latency")
    latency = {}
    with open(lat_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if float(row["arrival_rate_per_min"]) == config.latency.reference_rate:
                latency[row["policy"]] = row
    missing = sorted(set(metrics) - set(latency))
    if missing:
        raise MissingArtifact(f"latency_sweep.csv has no rows at the reference rate "
                              f"{config.latency.reference_rate:g}/min for {missing}; "
                              "run `latency` with the same config")
    rows = [[p, f"{m['quality_ratio']:.6f}", f"{m['cost_ratio']:.6f}",
             f"{float(latency[p]['p99_ms']):.6f}",
             f"{float(latency[p]['sla_violation_rate']):.6f}"] for p, m in metrics.items()]
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerows(rows)
    widths = [max(len(str(r[i])) for r in [REPORT_HEADER] + rows) for i in range(5)]
    lines = [" | ".join(str(c).ljust(wd) for c, wd in zip(r, widths))
             for r in [REPORT_HEADER] + rows]
    lines.insert(1, "-+-".join("-" * wd for wd in widths))
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return ["report.csv", "report.txt"]


COMMANDS = {
    "generate": cmd_generate,
    "train-router": cmd_train_router,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "coopt": cmd_coopt,
    "latency": cmd_latency,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def write_manifest(out: Path, config: RunConfig, command: str, artifacts: list[str],
                   wall_time: float) -> None:
    path = out / "run_manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update({
        "config_hash": config_hash(replace(config, output_dir=".")),
        "seed": config.seed,
        "versions": {"tierroute": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "pyyaml": yaml.__version__},
    })
    manifest.setdefault("runs", {})[command] = {
        "artifacts": sorted(artifacts),
        "wall_time_s": round(wall_time, 3),
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tierroute", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="YAML run config (defaults if omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, help="override the output directory")
    parser.add_argument("--policy", help="restrict to one policy")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
    parser.add_argument("--strict", action="store_true",
                        help="treat unstable load points as errors")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.out is not None:
            config = replace(config, output_dir=str(args.out))
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(replace(config, output_dir=".")))
        start = time.perf_counter()
        args.unstable = []
        artifacts = COMMANDS[args.command](config, out, args)
        write_manifest(out, config, args.command, artifacts, time.perf_counter() - start)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if args.unstable and args.strict:
        print(f"unstable queue: {', '.join(args.unstable)}", file=sys.stderr)
        return EXIT_UNSTABLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
