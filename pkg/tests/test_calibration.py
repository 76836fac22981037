import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from tierroute.calibration import (CoverageReport, ThresholdTable, calibrate_thresholds,
                                   coverage_check, quantile_threshold, read_thresholds_csv,
                                   risk_control_threshold, wilson_interval,
                                   write_thresholds_csv)
from tierroute.workload import generate_workload

Z95 = 1.959963984540054


def wilson_by_root_finding(x, n, z=Z95):
    """Endpoints p with |x/n - p| = z * sqrt(p(1-p)/n), found numerically."""
    phat = x / n
    f = lambda p: (phat - p) ** 2 - z * z * p * (1 - p) / n
    # f < 0 strictly inside (0, 1) near phat, so nudge the bracket off the boundary
    lo = 0.0 if x == 0 else brentq(f, 0.0, min(phat, 1 - 1e-15), xtol=1e-15)
    hi = 1.0 if x == n else brentq(f, max(phat, 1e-300), 1.0, xtol=1e-15)
    return lo, hi


def brute_quantile(u, alpha):
    u = sorted(u)
    n0 = len(u)
    if n0 == 0:
        return 0.0
    rank = 1
    while rank < (1 - alpha) * (n0 + 1) - 1e-9:
        rank += 1
    return 1.0 if rank > n0 else u[rank - 1]


def brute_risk_control(u, failed, alpha):
    n = len(u)
    best = None
    for d in u:
        accepted_fail = sum(1 for ui, fi in zip(u, failed) if fi and ui <= d)
        if (accepted_fail + 1) / (n + 1) <= alpha + 1e-12:
            best = d if best is None else max(best, d)
    return 0.0 if best is None else best


# -- Wilson ---------------------------------------------------------------------------

def test_wilson_zero_successes_has_zero_lower_bound():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0
    assert math.isclose(hi, wilson_by_root_finding(0, 100)[1], rel_tol=1e-9)


def test_wilson_half_is_centered():
    lo, hi = wilson_interval(50, 100)
    assert math.isclose((lo + hi) / 2, 0.5, abs_tol=1e-15)
    half = Z95 / (1 + Z95 ** 2 / 100) * math.sqrt(0.25 / 100 + Z95 ** 2 / 40000)
    assert math.isclose(hi - 0.5, half, rel_tol=1e-12)


def test_wilson_reference_interval():
    lo, hi = wilson_interval(21, 500)
    assert lo == pytest.approx(0.028, abs=5e-4)
    assert hi == pytest.approx(0.063, abs=5e-4)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 2000), frac=st.floats(0, 1))
def test_wilson_matches_root_finding(n, frac):
    x = int(round(frac * n))
    lo, hi = wilson_interval(x, n)
    olo, ohi = wilson_by_root_finding(x, n)
    assert lo == pytest.approx(olo, abs=1e-9)
    assert hi == pytest.approx(ohi, abs=1e-9)
    assert lo <= x / n <= hi


def test_wilson_rejects_bad_counts():
    for args in ((0, 0), (-1, 5), (6, 5)):
        with pytest.raises(ValueError):
            wilson_interval(*args)


def test_coverage_report_contains_rate():
    r = CoverageReport.from_counts(21, 500)
    assert r.wilson_low <= r.rate <= r.wilson_high
    assert CoverageReport.from_counts(0, 0).wilson_low is None


# -- threshold rules ------------------------------------------------------------------

def test_quantile_boundary_index_takes_the_largest():
    u = list(np.linspace(0.01, 0.19, 19))
    assert quantile_threshold(u, 0.05) == (max(u), False)


def test_quantile_single_value():
    assert quantile_threshold([0.37], 0.5) == (0.37, False)


def test_quantile_degenerate_cases():
    assert quantile_threshold([], 0.05) == (0.0, True)
    assert quantile_threshold([0.1, 0.2], 0.05) == (1.0, True)


@settings(max_examples=300, deadline=None)
@given(u=st.lists(st.floats(0, 1), min_size=0, max_size=5),
       alpha=st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.25, 0.5, 0.75]))
def test_quantile_matches_brute_force(u, alpha):
    assert quantile_threshold(u, alpha)[0] == brute_quantile(u, alpha)


@settings(max_examples=300, deadline=None)
@given(data=st.lists(st.tuples(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.8]), st.booleans()),
                     min_size=0, max_size=12),
       alpha=st.sampled_from([0.05, 0.1, 0.2, 0.3, 0.5]))
def test_risk_control_matches_brute_force(data, alpha):
    u = [d[0] for d in data]
    failed = [d[1] for d in data]
    assert risk_control_threshold(u, failed, alpha)[0] == brute_risk_control(u, failed, alpha)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(5, 200), seed=st.integers(0, 1000))
def test_risk_control_monotone_in_alpha(n, seed):
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    failed = rng.random(n) < u
    deltas = [risk_control_threshold(u, failed, a)[0] for a in (0.05, 0.1, 0.2, 0.4)]
    assert all(a <= b for a, b in zip(deltas, deltas[1:]))


def test_risk_control_marginal_guarantee_on_exchangeable_data():
    rng = np.random.default_rng(7)
    alpha, rates = 0.1, []
    for _ in range(400):
        u = rng.random(300)
        failed = rng.random(300) < u ** 2
        d, _ = risk_control_threshold(u[:100], failed[:100], alpha)
        rates.append(np.mean(failed[100:] & (u[100:] <= d)))
    assert np.mean(rates) <= alpha


# -- pipeline calibration -------------------------------------------------------------

def test_zero_threshold_means_no_violations(portfolio, taus, small_pipeline):
    q = small_pipeline.test_set
    cells, pooled = coverage_check(portfolio, None, ThresholdTable.constant(4, 6, 0.0), q,
                                   seed=1, taus=taus, entry=np.ones(len(q), dtype=int))
    assert pooled.violations == 0
    assert all(c.violations == 0 for c in cells.values())


def test_calibration_is_idempotent(small_pipeline, taus):
    p = small_pipeline
    a = calibrate_thresholds(p.portfolio, p.router, p.calib_set, 0.05, seed=1, taus=taus)
    b = calibrate_thresholds(p.portfolio, p.router, p.calib_set, 0.05, seed=1, taus=taus)
    assert a.equals(b)
    assert set(a.delta) == {(k, t) for k in (1, 2, 3) for t in range(6)}


def test_empty_calibration_set_rejected(small_pipeline, taus):
    p = small_pipeline
    with pytest.raises(ValueError):
        calibrate_thresholds(p.portfolio, p.router, p.calib_set.take([]), 0.05, seed=1,
                             taus=taus)


def test_thresholds_csv_round_trip(small_pipeline, tmp_path):
    th = small_pipeline.thresholds
    write_thresholds_csv(th, tmp_path / "t.csv")
    back = read_thresholds_csv(tmp_path / "t.csv", th.alpha, th.rule)
    assert back.equals(th)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == \
        "tier,task,delta,n_calib,n0,degenerate"


@pytest.mark.parametrize("link,noise", [("logistic", 0.05), ("probit", 0.05),
                                        ("logistic", 0.1)])
def test_coverage_holds_across_oracle_variants(portfolio, wcfg, taus, link, noise):
    tiers = tuple(replace(t, link=link, quality_noise=noise) for t in portfolio)
    rates = []
    for seed in range(4):
        cal = generate_workload(wcfg, seed, n=3000)
        test = generate_workload(wcfg, seed + 100, n=6000, id_offset=10 ** 6)
        th = calibrate_thresholds(tiers, None, cal, 0.05, seed=seed, taus=taus,
                                  entry=np.ones(len(cal), dtype=int))
        cells, _ = coverage_check(tiers, None, th, test, seed=seed, taus=taus,
                                  entry=np.ones(len(test), dtype=int))
        v = sum(cells[(1, t)].violations for t in range(6))
        n = sum(cells[(1, t)].total for t in range(6))
        rates.append(v / n)
    assert np.mean(rates) <= 0.06


def test_reference_pooled_violation_within_slack(reference, taus):
    _, pooled = coverage_check(reference.portfolio, reference.router, reference.thresholds,
                               reference.test_set, seed=0, taus=taus)
    assert pooled.total > len(reference.test_set) // 2
    assert pooled.rate <= 0.05 + (pooled.wilson_high - pooled.rate)
