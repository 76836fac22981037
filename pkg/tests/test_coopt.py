import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tierroute.cascade import CascadeRun, Policy, run_policy
from tierroute.coopt import (CooptConfig, CooptData, FailureCluster, FailureRecord,
                             apply_distillation, build_distill_set, cluster_failures,
                             cluster_regions, collect_failures, coopt_loop, kmeans,
                             kmeans_with_silhouette, pca_project, rank_and_select,
                             silhouette, write_history_csv)
from tierroute.experiment import training_config
from tierroute.portfolio import effective_capability, evaluate_many
from tierroute.router import TrainingConfig, init_model
from tierroute.workload import Workload


def brute_two_means(X):
    """Minimum within-cluster sum of squares over every 2-partition."""
    n = len(X)
    best = math.inf
    for mask in itertools.product([0, 1], repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.all() or not labels.any():
            continue
        cost = sum(((X[labels == j] - X[labels == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, cost)
    return best


def brute_eigenvalues(C):
    """Roots of det(C - x I) via the characteristic polynomial, polished by bisection."""
    coeffs = np.poly(C)
    roots = np.sort(np.real(np.roots(coeffs)))[::-1]
    f = lambda x: np.linalg.det(C - x * np.eye(len(C)))
    out = []
    for r in roots:
        lo, hi = r - 1e-6 * max(1, abs(r)), r + 1e-6 * max(1, abs(r))
        if f(lo) * f(hi) < 0:
            for _ in range(200):
                mid = (lo + hi) / 2
                if f(lo) * f(mid) <= 0:
                    hi = mid
                else:
                    lo = mid
            r = (lo + hi) / 2
        out.append(r)
    return np.array(out)


def cluster(cid, task, size, gap=0.1, members=None):
    members = tuple(range(size)) if members is None else tuple(members)
    return FailureCluster(cid, task, (0.0,), members, size, gap)


def failure(i, gap, qid=None, task=0):
    return FailureRecord(i, i if qid is None else qid, task, 1, (1,), np.zeros(4),
                         np.zeros(8), gap)


# -- PCA ------------------------------------------------------------------------------

def test_pca_on_a_plane_keeps_everything(rng):
    basis = rng.normal(size=(2, 10))
    X = rng.normal(size=(200, 2)) @ basis + 3.0
    res = pca_project(X, 2)
    assert res.retained_variance == pytest.approx(1.0, abs=1e-9)
    assert res.projected.shape == (200, 2)


def test_pca_isotropic_keeps_about_half(rng):
    X = rng.normal(size=(20_000, 32))
    assert pca_project(X, 16).retained_variance == pytest.approx(0.5, abs=0.02)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pca_eigenvalues_match_characteristic_polynomial(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 4)) * rng.uniform(0.2, 3.0, size=4)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / 29
    res = pca_project(X, 2)
    assert np.allclose(res.eigenvalues, brute_eigenvalues(C), rtol=0, atol=1e-8)


def test_pca_rejects_bad_inputs():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 3)), 2)
    with pytest.raises(ValueError):
        pca_project(np.zeros((5, 3)), 0)


# -- k-means --------------------------------------------------------------------------

def test_separated_blobs_have_high_silhouette(rng):
    X = np.vstack([rng.normal(0, 0.1, size=(50, 2)), rng.normal(10, 0.1, size=(50, 2))])
    res = kmeans_with_silhouette(X, (2,), seed=0)
    assert res.chosen_k == 2
    assert res.silhouette > 0.8


def test_k_equal_to_n_gives_zero_inertia(rng):
    X = rng.normal(size=(7, 3))
    assign, _, inertia = kmeans(X, 7, seed=0)
    assert sorted(assign.tolist()) == list(range(7))
    assert inertia == 0.0


def test_kmeans_is_deterministic(rng):
    X = rng.normal(size=(200, 4))
    a = kmeans(X, 5, seed=3)
    b = kmeans(X, 5, seed=3)
    assert np.array_equal(a[0], b[0])
    assert a[2] == b[2]


@settings(max_examples=200, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 100_000))
def test_two_means_matches_brute_force(n, seed):
    X = np.random.default_rng(seed).normal(size=(n, 2))
    _, _, inertia = kmeans(X, 2, seed=seed)
    assert inertia == pytest.approx(brute_two_means(X), rel=1e-9, abs=1e-12)


def test_too_few_points_gives_trivial_partition(rng):
    res = kmeans_with_silhouette(rng.normal(size=(4, 2)), (5, 10), seed=0)
    assert res.trivial and res.chosen_k == 1
    assert np.all(res.assignment == 0)


def test_silhouette_single_cluster_is_zero(rng):
    assert silhouette(rng.normal(size=(5, 2)), np.zeros(5)) == 0.0


# -- ranking and distillation set -----------------------------------------------------

def test_rank_by_score():
    cs = [cluster(0, 0, 3, 1.0), cluster(1, 0, 1, 1.0), cluster(2, 0, 2, 1.0)]
    assert [c.cluster_id for c in rank_and_select(cs, 2)] == [0, 2]


def test_rank_ties_go_to_lower_ids():
    cs = [cluster(i, 0, 2, 0.5) for i in (4, 1, 3, 2)]
    assert [c.cluster_id for c in rank_and_select(cs, 2)] == [1, 2]


def test_rank_truncation_returns_all():
    cs = [cluster(0, 0, 2, 0.5), cluster(1, 1, 3, 0.5)]
    assert len(rank_and_select(cs, 5)) == 2


def test_ten_member_cluster_keeps_three_hardest():
    fails = [failure(i, gap=i / 100) for i in range(10)]
    ds = build_distill_set([cluster(0, 0, 10)], fails, pool_size=1000, seed=0)
    assert ds.hardest[0] == [9, 8, 7]


def test_replay_is_twenty_percent():
    fails = [failure(i, gap=0.1) for i in range(334)]
    ds = build_distill_set([cluster(0, 0, 334)], fails, pool_size=5000, seed=0)
    assert ds.n_failures == 101  # ceil(0.3 * 334)
    fails = [failure(i, gap=0.1) for i in range(100)]
    ds = build_distill_set([cluster(0, 0, 100)], fails, pool_size=5000, seed=0,
                           hard_fraction=1.0)
    assert ds.n_failures == 100
    assert len(ds.replay) == 20
    assert len(set(ds.replay.tolist())) == 20


def test_equal_gaps_fall_back_to_query_id():
    fails = [failure(i, gap=0.2, qid=100 - i) for i in range(10)]
    ds = build_distill_set([cluster(0, 0, 10)], fails, pool_size=10, seed=0)
    assert [fails[i].query_id for i in ds.hardest[0]] == [91, 92, 93]


# -- patches --------------------------------------------------------------------------

def region(centre=np.zeros(8), radius=1.0, task=0):
    return [(task, centre, radius)]


def test_zero_eta_changes_nothing(portfolio, rng):
    patches = apply_distillation([], region(), portfolio, 4, eta=0.0)
    X = rng.normal(0, 0.3, size=(50, 8))
    for tier in portfolio[:-1]:
        assert np.array_equal(effective_capability(tier, np.zeros(50, int), X, patches),
                              np.full(50, tier.capability))


def test_full_eta_hits_the_cap(portfolio):
    patches = apply_distillation([], region(), portfolio, 4, eta=1.0, cap_margin=0.01)
    for tier in portfolio[:-1]:
        c = effective_capability(tier, np.array([0]), np.zeros((1, 8)), patches)[0]
        assert c == pytest.approx(0.95 - 0.01, abs=1e-15)
        assert c < portfolio[-1].capability


def test_distillation_argument_checks(portfolio):
    with pytest.raises(ValueError):
        apply_distillation([], region(), portfolio, 3, eta=0.5)
    with pytest.raises(ValueError):
        apply_distillation([], region(), portfolio, 4, eta=1.5)


def test_patching_raises_pass_rate_on_cluster_members(reference, taus):
    p = reference
    run = run_policy(Policy.ROUTED, p.train_set, p.portfolio, p.tasks, seed=0,
                     router=p.router, thresholds=p.thresholds)
    fails = collect_failures(run, p.router, p.train_set, taus)
    selected = rank_and_select(cluster_failures(fails, 0), 5)
    distill = build_distill_set(selected, fails, len(p.train_set), 0)
    patches = apply_distillation([], cluster_regions(selected, fails, distill), p.portfolio,
                                 4, eta=0.6)
    rows = [fails[i].query_index for c in selected for i in c.member_ids]
    members = p.train_set.take(rows)
    before = evaluate_many(p.portfolio[0], members, [], 0, taus).passes.mean()
    after = evaluate_many(p.portfolio[0], members, patches, 0, taus).passes.mean()
    assert after > before


# -- failure collection ---------------------------------------------------------------

def hand_run():
    """Query 0 climbs T1 -> T2 -> T3; query 1 is answered at T2."""
    f = np.array
    return CascadeRun(
        query_id=f([10, 11]), task_id=f([0, 0]), entry_tier=f([1, 2]), final_tier=f([3, 2]),
        n_attempts=f([3, 1]), cumulative_cost=f([0.0, 0.0]), final_quality=f([0.95, 0.9]),
        final_pass=f([True, True]), latency_ms=f([0.0, 0.0]),
        att_query=f([0, 0, 0, 1]), att_tier=f([1, 2, 3, 2]),
        att_quality=f([0.60, 0.80, 0.95, 0.9]), att_pass=f([False, False, True, True]),
        att_uncertainty=f([0.5, 0.4, 0.1, 0.1]), att_cost=f([0.0] * 4),
        att_latency_ms=f([0.0] * 4), att_escalated=f([True, True, False, False]),
        att_tokens=f([100] * 4))


def hand_workload():
    return Workload(np.array([10, 11]), np.array([0, 0]), np.array([0.5, 0.2]),
                    np.zeros((2, 8)), np.array([100, 100]), np.zeros(2, dtype=bool))


def test_quality_gap_uses_best_cheap_attempt():
    router = init_model(6, 8, 4, TrainingConfig())
    taus = np.full(6, 0.90)
    recs = collect_failures(hand_run(), router, hand_workload(), taus)
    assert len(recs) == 1
    assert recs[0].quality_gap == pytest.approx(0.10, abs=1e-15)
    assert recs[0].escalated_from == (1, 2)
    assert recs[0].hidden.shape == (32,)


def test_failure_count_matches_escalations(small_pipeline, taus):
    p = small_pipeline
    run = run_policy(Policy.ROUTED, p.test_set, p.portfolio, p.tasks, seed=1,
                     router=p.router, thresholds=p.thresholds)
    recs = collect_failures(run, p.router, p.test_set, taus)
    assert len(recs) == int((run.n_attempts > 1).sum())
    single = run_policy(Policy.NO_CASCADE, p.test_set, p.portfolio, p.tasks, seed=1,
                        router=p.router)
    assert collect_failures(single, p.router, p.test_set, taus) == []


# -- loop -----------------------------------------------------------------------------

def test_large_epsilon_stops_after_one_iteration(small_pipeline, tmp_path):
    p = small_pipeline
    data = CooptData(p.train_set, p.calib_set, p.test_set)
    state, hist = coopt_loop(p.router, p.portfolio, p.tasks, data, training_config(p.config),
                             CooptConfig(epsilon=1.0), seed=1)
    assert state.iteration == 1 and state.converged
    assert len(hist) == 2
    write_history_csv(state, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == ("iteration,quality_ratio,cost_ratio,t1t2_share,t4_share,"
                        "clusters_selected,patches_total")
    assert len(lines) == 3


def test_loop_config_validation():
    with pytest.raises(ValueError):
        CooptConfig(epsilon=0)
    with pytest.raises(ValueError):
        CooptConfig(targeting="nearest")
