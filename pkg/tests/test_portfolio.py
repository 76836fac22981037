from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import expit
from scipy.stats import norm

from tierroute.portfolio import (CapabilityPatch, TierSpec, attempt_cost,
                                 cheapest_sufficient_tier, cheapest_sufficient_tiers,
                                 default_portfolio, effective_capability, evaluate,
                                 evaluate_many, validate_portfolio)
from tierroute.workload import Query, Workload, WorkloadConfig, generate_workload


def flat_workload(difficulty, n, tokens=64, task=0, start=0, features=None):
    feats = np.zeros((n, 8)) if features is None else features
    return Workload(np.arange(start, start + n), np.full(n, task), np.full(n, float(difficulty)),
                    feats, np.full(n, tokens), np.zeros(n, dtype=bool))


TAUS = np.array([0.5])


def test_default_prices_and_order():
    p = default_portfolio()
    assert [t.cost_per_1k for t in p] == [0.01, 0.10, 0.80, 8.00]
    assert [t.capability for t in p] == [0.35, 0.55, 0.75, 0.95]
    assert [t.workers for t in p] == [8, 4, 4, 1]
    assert p[3].rate_limit_per_sec == 60
    validate_portfolio(p)


def test_validation_rejects_unordered_tiers():
    p = default_portfolio()
    with pytest.raises(ValueError):
        validate_portfolio((p[1], p[0]))
    with pytest.raises(ValueError):
        validate_portfolio((p[0], replace(p[1], cost_per_1k=0.001, tier_id=2)))
    with pytest.raises(ValueError):
        TierSpec(1, "x", 0.0, 0.5)
    with pytest.raises(ValueError):
        TierSpec(1, "x", 1.0, 0.5, link="tanh")


def test_quality_is_half_at_the_symmetry_point():
    tier = TierSpec(1, "t", 1.0, 0.4, quality_noise=0.0, quality_scale=0.37)
    out = evaluate(tier, flat_workload(0.4, 1)[0], [], 0, TAUS)
    assert out.quality == 0.5
    assert out.passes  # 0.5 >= 0.5


def test_cost_at_1k_tokens():
    top = default_portfolio()[3]
    out = evaluate(top, flat_workload(0.2, 1, tokens=1000)[0], [], 0, TAUS)
    assert out.cost == 8.00


@settings(max_examples=100, deadline=None)
@given(c=st.sampled_from([0.01, 0.10, 0.80, 8.00]), tokens=st.integers(1, 4096))
def test_cost_is_exact(c, tokens):
    assert attempt_cost(c, tokens) == c * tokens / 1000


def test_pass_rate_matches_numeric_integration():
    tier = TierSpec(1, "t", 1.0, 0.9, quality_noise=0.05)
    tau = 0.95
    out = evaluate_many(tier, flat_workload(0.3, 10_000), [], 17, np.array([tau]))
    mu = expit((0.9 - 0.3) / tier.quality_scale)
    # P(clamp01(mu + 0.05 Z) >= tau) by integrating the normal density
    lo = (tau - mu) / tier.quality_noise
    p, _ = integrate.quad(norm.pdf, lo, np.inf)
    se = np.sqrt(p * (1 - p) / 10_000)
    assert abs(out.passes.mean() - p) <= 3 * se


def test_passes_iff_quality_meets_tau(taus):
    q = generate_workload(WorkloadConfig(), 4, n=3000)
    for tier in default_portfolio():
        out = evaluate_many(tier, q, [], 4, taus)
        assert np.array_equal(out.passes, out.quality >= taus[q.task_id])
        assert np.all((out.quality >= 0) & (out.quality <= 1))
        assert np.all((out.uncertainty >= 0) & (out.uncertainty <= 1))


def test_uncertainty_mean_follows_link():
    tier = TierSpec(1, "t", 1.0, 0.5)
    out = evaluate_many(tier, flat_workload(0.45, 20_000), [], 3, TAUS)
    m = expit(0.05 / tier.uncertainty_scale)
    assert abs(out.uncertainty.mean() - (1 - m)) < 0.003


def test_cheapest_tier_easy_and_impossible():
    p = tuple(replace(t, quality_noise=0.0) for t in default_portfolio())
    easy = flat_workload(0.0, 1)[0]
    assert cheapest_sufficient_tier(easy, p, [], 0, np.array([0.9])) == 1
    hard = flat_workload(1.0, 1)[0]
    assert cheapest_sufficient_tier(hard, p, [], 0, np.array([0.9])) is None


def test_label_histogram_matches_brute_force(portfolio, taus):
    cfg = WorkloadConfig()
    q = generate_workload(cfg, 8, n=1000)
    q = replace(q, difficulty=np.clip(q.difficulty + 0.2, 0, 1))  # mid difficulty
    fast = cheapest_sufficient_tiers(q, portfolio, [], 8, taus)
    slow = [cheapest_sufficient_tier(x, portfolio, [], 8, taus) or 0 for x in q]
    assert np.array_equal(np.bincount(fast, minlength=5), np.bincount(slow, minlength=5))


def test_monotone_in_tier_without_noise():
    p = tuple(replace(t, quality_noise=0.0) for t in default_portfolio())
    q = flat_workload(0.6, 4000)
    quals = [evaluate_many(t, q, [], 0, TAUS).quality for t in p]
    unc = [evaluate_many(t, q, [], 0, TAUS).uncertainty.mean() for t in p]
    for a, b in zip(quals, quals[1:]):
        assert np.all(b >= a)
    assert all(b < a for a, b in zip(unc, unc[1:]))


def test_quality_and_uncertainty_are_negatively_correlated(taus):
    q = generate_workload(WorkloadConfig(), 6, n=20_000)
    out = evaluate_many(default_portfolio()[1], q, [], 6, taus)
    assert np.corrcoef(out.quality, out.uncertainty)[0, 1] < -0.5


@pytest.mark.parametrize("link", ["logistic", "probit"])
def test_both_links_supported(link):
    tier = TierSpec(1, "t", 1.0, 0.5, quality_noise=0.0, link=link)
    out = evaluate_many(tier, flat_workload(0.5, 10), [], 0, TAUS)
    assert np.all(out.quality == 0.5)


def test_outcomes_are_order_independent(taus):
    q = generate_workload(WorkloadConfig(), 2, n=300)
    perm = np.random.default_rng(0).permutation(300)
    tier = default_portfolio()[0]
    a = evaluate_many(tier, q, [], 5, taus)
    b = evaluate_many(tier, q.take(perm), [], 5, taus)
    assert np.array_equal(a.quality[perm], b.quality)
    assert np.array_equal(a.uncertainty[perm], b.uncertainty)


# -- patches ------------------------------------------------------------------------

def test_patch_boosts_sum_and_respect_ceiling():
    tier = default_portfolio()[0]
    feats = np.zeros((3, 8))
    feats[2, 0] = 5.0
    patches = [CapabilityPatch(1, 0, (0.0,) * 8, 1.0, 0.2, ceiling=0.94),
               CapabilityPatch(1, 0, (0.0,) * 8, 1.0, 0.1, ceiling=0.94),
               CapabilityPatch(1, 1, (0.0,) * 8, 1.0, 0.3, ceiling=0.94),  # other task
               CapabilityPatch(2, 0, (0.0,) * 8, 1.0, 0.3, ceiling=0.94)]  # other tier
    cap = effective_capability(tier, np.array([0, 0, 0]), feats, patches)
    assert np.allclose(cap, [0.65, 0.65, 0.35])
    big = [CapabilityPatch(1, 0, (0.0,) * 8, 1.0, 0.5, ceiling=0.94)] * 3
    assert effective_capability(tier, np.array([0]), feats[:1], big)[0] == 0.94


@settings(max_examples=40, deadline=None)
@given(radius=st.floats(0.1, 3.0), boost=st.floats(0.0, 0.6), seed=st.integers(0, 1000))
def test_patch_locality_and_monotonicity(radius, boost, seed, taus):
    q = generate_workload(WorkloadConfig(), seed, n=400)
    centre = tuple(float(x) for x in q.features[0])
    patch = CapabilityPatch(2, int(q.task_id[0]), centre, radius, boost, ceiling=0.94)
    tier = default_portfolio()[1]
    before = evaluate_many(tier, q, [], seed, taus)
    after = evaluate_many(tier, q, [patch], seed, taus)
    inside = (q.task_id == patch.task_id) & \
        (np.linalg.norm(q.features - np.array(centre), axis=1) <= radius)
    assert np.array_equal(before.quality[~inside], after.quality[~inside])
    assert np.array_equal(before.uncertainty[~inside], after.uncertainty[~inside])
    # with common random numbers a boost never lowers quality or raises uncertainty
    assert np.all(after.quality >= before.quality)
    assert np.all(after.uncertainty <= before.uncertainty + 1e-12)


def test_single_query_and_batch_agree(taus):
    q = generate_workload(WorkloadConfig(), 1, n=5)
    tier = default_portfolio()[2]
    batch = evaluate_many(tier, q, [], 1, taus)
    for i, x in enumerate(q):
        assert evaluate(tier, x, [], 1, taus) == batch[i]


def test_query_record_accepted_directly(taus):
    x = Query(5, 0, 0.2, (0.0,) * 8, 10)
    assert evaluate(default_portfolio()[0], x, [], 0, taus).tokens == 10
