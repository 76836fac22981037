"""Pipeline assembly shared by the CLI, the experiment scripts and the tests."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .calibration import (ThresholdTable, calibrate_thresholds, quantile_threshold,
                          risk_control_threshold)
from .cascade import ExperimentMetrics, Policy, run_experiment
from .config import RunConfig
from .portfolio import TierSpec, evaluate_many, validate_portfolio, with_costs
from .router import RouterModel, TrainingConfig, label_examples, train
from .workload import (ShiftScenario, TaskSpec, Workload, WorkloadConfig, apply_shift,
                       generate_task_workload, generate_workload)

# disjoint query-id ranges keep keyed oracle draws independent across splits
ID_OFFSETS = {"train": 0, "calib": 1_000_000, "test": 2_000_000}
SPLIT_SALT = {"train": 1, "calib": 2, "test": 3}


def split_seed(seed: int, split: str) -> int:
    return 10 * seed + SPLIT_SALT[split]


def build_portfolio(config: RunConfig) -> tuple[TierSpec, ...]:
    p = config.portfolio
    K = len(p.costs)
    tiers = []
    for k in range(K):
        top = k == K - 1
        tiers.append(TierSpec(
            k + 1, f"T{k + 1}", p.costs[k], p.capabilities[k], workers=p.workers[k],
            service_rate=1000.0 / p.service_ms[k],
            rate_limit_per_sec=p.top_rate_limit if top else None,
            burst=p.top_burst if top else None))
    tiers = tuple(tiers)
    validate_portfolio(tiers)
    return tiers


def workload_config(config: RunConfig) -> WorkloadConfig:
    w = config.workload
    wc = WorkloadConfig(feature_dim=w.feature_dim, feature_noise=w.feature_noise,
                        token_sigma=w.token_sigma)
    return wc.with_tau_scale(w.tau_scale) if w.tau_scale != 1.0 else wc


def training_config(config: RunConfig) -> TrainingConfig:
    r = config.router
    return TrainingConfig(r.lambda_cost, r.lambda_quality, r.learning_rate, r.batch_size,
                          r.epochs, r.patience, r.val_fraction, r.embed_dim, r.hidden_dim,
                          seed=config.seed)


def generate_split(config: RunConfig, split: str) -> Workload:
    w = config.workload
    n = {"train": w.n_train, "calib": w.n_calib, "test": w.n_test}[split]
    queries = generate_workload(workload_config(config), split_seed(config.seed, split), n=n,
                                id_offset=ID_OFFSETS[split])
    if split == "test" and w.shift_kind != "none":
        queries = apply_shift(queries, ShiftScenario(w.shift_kind, w.shift_magnitude),
                              split_seed(config.seed, "test"))
    return queries


def train_router(config: RunConfig, portfolio: Sequence[TierSpec], train_set: Workload,
                 tasks: Sequence[TaskSpec]) -> RouterModel:
    taus = np.array([t.quality_threshold for t in tasks])
    examples = label_examples(train_set, portfolio, [], config.seed, taus)
    return train(examples, training_config(config), [t.cost_per_1k for t in portfolio],
                 len(tasks))


def calibrate(config: RunConfig, portfolio: Sequence[TierSpec], router: RouterModel,
              calib_set: Workload, tasks: Sequence[TaskSpec],
              alpha: float | None = None) -> ThresholdTable:
    taus = np.array([t.quality_threshold for t in tasks])
    alpha = config.calibration.alpha if alpha is None else alpha
    return calibrate_thresholds(portfolio, router, calib_set, alpha, seed=config.seed,
                                taus=taus, rule=config.calibration.rule)


@dataclass
class Pipeline:
    config: RunConfig
    tasks: tuple[TaskSpec, ...]
    portfolio: tuple[TierSpec, ...]
    train_set: Workload
    calib_set: Workload
    test_set: Workload
    router: RouterModel
    thresholds: ThresholdTable

    def run(self, policy: Policy | str, portfolio: Sequence[TierSpec] | None = None,
            thresholds: ThresholdTable | None = None) -> ExperimentMetrics:
        metrics, _ = run_experiment(policy, self.test_set, portfolio or self.portfolio,
                                    self.tasks, seed=self.config.seed, router=self.router,
                                    thresholds=thresholds or self.thresholds)
        return metrics


def build_pipeline(config: RunConfig) -> Pipeline:
    tasks = workload_config(config).tasks
    portfolio = build_portfolio(config)
    train_set = generate_split(config, "train")
    calib_set = generate_split(config, "calib")
    test_set = generate_split(config, "test")
    router = train_router(config, portfolio, train_set, tasks)
    thresholds = calibrate(config, portfolio, router, calib_set, tasks)
    return Pipeline(config, tasks, portfolio, train_set, calib_set, test_set, router,
                    thresholds)


# -- sweeps ---------------------------------------------------------------------------

SWEEP_COLUMNS = {
    "alpha": ["alpha", "quality_ratio", "cost_ratio", "coverage_violation_rate"],
    "tau_scale": ["tau_scale", "quality_ratio", "cost_ratio", "pass_rate"],
    "lambda_cost": ["lambda_cost", "quality_ratio", "cost_ratio", "cheap_share"],
    "lambda_quality": ["lambda_quality", "quality_ratio", "cost_ratio", "cheap_share"],
    "cost_ratio": ["multiplier", "top_cost", "quality_ratio", "cost_ratio", "savings"],
    "shift": ["magnitude", "quality_ratio", "cost_ratio", "coverage_violation_rate"],
}


def cost_ratio_sweep(pipe: Pipeline, multipliers: Sequence[float]) -> list[dict]:
    """Re-price the top tier at multiplier x the cheapest tier; routing and
    thresholds stay fixed, so only the accounting changes."""
    rows = []
    base = [t.cost_per_1k for t in pipe.portfolio]
    for mult in multipliers:
        if mult <= 0:
            raise ValueError("cost multipliers must be > 0")
        costs = base[:-1] + [base[0] * mult]
        m = pipe.run(Policy.ROUTED, portfolio=with_costs(pipe.portfolio, costs))
        rows.append({"multiplier": mult, "top_cost": costs[-1],
                     "quality_ratio": m.quality_ratio, "cost_ratio": m.cost_ratio,
                     "savings": 1.0 - m.cost_ratio})
    return rows


def sweep_point(config: RunConfig, parameter: str, value: float,
                pipe: Pipeline | None = None) -> dict:
    """Metrics of the routed policy with one knob moved."""
    if parameter == "alpha":
        pipe = pipe or build_pipeline(config)
        th = calibrate(config, pipe.portfolio, pipe.router, pipe.calib_set, pipe.tasks, value)
        m = pipe.run(Policy.ROUTED, thresholds=th)
        return {"alpha": value, "quality_ratio": m.quality_ratio, "cost_ratio": m.cost_ratio,
                "coverage_violation_rate": m.coverage_violation_rate}
    if parameter == "tau_scale":
        m = build_pipeline(replace(config, workload=replace(config.workload,
                                                            tau_scale=value))
                           ).run(Policy.ROUTED)
        return {"tau_scale": value, "quality_ratio": m.quality_ratio,
                "cost_ratio": m.cost_ratio, "pass_rate": m.pass_rate}
    if parameter in ("lambda_cost", "lambda_quality"):
        router = replace(config.router, **{parameter: value})
        m = build_pipeline(replace(config, router=router)).run(Policy.ROUTED)
        return {parameter: value, "quality_ratio": m.quality_ratio,
                "cost_ratio": m.cost_ratio, "cheap_share": m.cheap_share}
    if parameter == "cost_ratio":
        return cost_ratio_sweep(pipe or build_pipeline(config), [value])[0]
    if parameter == "shift":
        kind = config.workload.shift_kind if config.workload.shift_kind != "none" \
            else "difficulty_shift"
        pipe = pipe or build_pipeline(config)
        test = generate_split(replace(config, workload=replace(
            config.workload, shift_kind=kind if value > 0 else "none",
            shift_magnitude=value)), "test")
        m, _ = run_experiment(Policy.ROUTED, test, pipe.portfolio, pipe.tasks,
                              seed=config.seed, router=pipe.router, thresholds=pipe.thresholds)
        return {"magnitude": value, "quality_ratio": m.quality_ratio,
                "cost_ratio": m.cost_ratio,
                "coverage_violation_rate": m.coverage_violation_rate}
    raise ValueError(f"unknown sweep parameter {parameter!r}")


SHARED_PIPELINE = ("alpha", "cost_ratio", "shift")  # points reuse one trained router


# -- per-cell coverage ----------------------------------------------------------------

def cell_coverage(config: RunConfig, seed: int, n_calib: int = 500, n_test: int = 10_000,
                  alpha: float | None = None) -> dict[tuple[int, int], float]:
    """Accepted-but-failed rate of every (tier k < K, task t) cell when `n_calib`
    task-t queries calibrate tier k directly and `n_test` fresh ones test it."""
    alpha = config.calibration.alpha if alpha is None else alpha
    wc = workload_config(config)
    portfolio = build_portfolio(config)
    taus = wc.taus()
    rates = {}
    for tier in portfolio[:-1]:
        for t in range(wc.n_tasks):
            base = (tier.tier_id * wc.n_tasks + t) * (n_calib + n_test)
            cal = generate_task_workload(wc, t, n_calib, 1000 * seed + 7, id_offset=base)
            test = generate_task_workload(wc, t, n_test, 1000 * seed + 8,
                                          id_offset=base + n_calib)
            c = evaluate_many(tier, cal, [], seed, taus)
            if config.calibration.rule == "risk_control":
                delta, _ = risk_control_threshold(c.uncertainty, ~c.passes, alpha)
            else:
                delta, _ = quantile_threshold(c.uncertainty[c.passes], alpha)
            o = evaluate_many(tier, test, [], seed, taus)
            rates[(tier.tier_id, t)] = float(np.mean((o.uncertainty <= delta) & ~o.passes))
    return rates
