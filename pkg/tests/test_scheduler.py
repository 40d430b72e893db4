import math

import numpy as np
import pytest

from loraserve.metrics import linear_reward
from loraserve.scheduler import (
    AdmissionState,
    QueueTooLarge,
    Request,
    SchedulerConfig,
    cluster_order,
    early_abort_filter,
    estimate_serveable,
    fcfs_order,
    lcfs_order,
    most_recent_in_order,
    optimal_admission_oracle,
)


def req(i, t, adapter="a"):
    return Request(i, adapter, t, 10, 10)


def test_fcfs_lcfs_orders_and_ties():
    q = [req(2, 1.0), req(0, 0.0), req(1, 1.0)]
    assert [r.id for r in fcfs_order(q)] == [0, 1, 2]
    assert [r.id for r in lcfs_order(q)] == [1, 2, 0]


def test_abort_rule_example():
    state = AdmissionState(l_prefill_max=1.0)
    aborted, kept = early_abort_filter([req(0, 0.0), req(1, 4.0)], state, now=5.5, tl_max=6.0)
    assert [r.id for r in aborted] == [0]  # 5.5 + 1.0 > 6
    assert [r.id for r in kept] == [1]


def test_no_prefill_no_aborts_for_young_queue():
    state = AdmissionState(l_prefill_max=0.0)
    q = [req(i, float(i)) for i in range(6)]
    aborted, kept = early_abort_filter(q, state, now=6.0, tl_max=6.0)
    assert aborted == [] and len(kept) == 6


def test_order_follows_queue_pressure():
    q = [req(0, 0.0), req(1, 1.0), req(2, 2.0)]
    calm = AdmissionState(r1_estimate=3, r2_estimate=5)
    assert [r.id for r in early_abort_filter(q, calm, 2.0, 6.0)[1]] == [0, 1, 2]
    busy = AdmissionState(r1_estimate=5, r2_estimate=3)
    assert [r.id for r in early_abort_filter(q, busy, 2.0, 6.0)[1]] == [2, 1, 0]


def test_moving_average():
    s = AdmissionState(decay=0.9)
    s.observe_arrivals(10)
    s.observe_arrivals(10)
    assert s.r1_estimate == pytest.approx(1.9)
    s.observe_prefill(0.3)
    s.observe_prefill(0.1)
    assert s.l_prefill_max == 0.3


def test_clustering_defers_third_adapter():
    q = [req(0, 0, "a"), req(1, 1, "a"), req(2, 2, "b"), req(3, 3, "c")]
    out = cluster_order(q, running_adapters=[], cluster_limit=2)
    assert [r.id for r in out] == [0, 1, 2, 3]
    q = [req(0, 0, "c"), req(1, 1, "a"), req(2, 2, "b"), req(3, 3, "a")]
    out = cluster_order(q, running_adapters=["a", "b"], cluster_limit=2)
    assert [r.id for r in out] == [1, 2, 3, 0]
    assert cluster_order(q, ["a"], None) == q


def test_config_validation():
    with pytest.raises(ValueError):
        SchedulerConfig(cluster_limit=0)
    with pytest.raises(ValueError):
        SchedulerConfig(slo_first_token=0)
    with pytest.raises(ValueError):
        SchedulerConfig(policy="random")


def test_oracle_small_example():
    sol = optimal_admission_oracle([0, 1, 2, 3], 2, linear_reward(6), now=4.0)
    assert sol.order == (2, 3) and sol.feasible
    assert sol.total_reward == pytest.approx(1.0)


def test_oracle_serving_everyone_prefers_fcfs():
    # strictly concave reward so order matters
    reward = lambda t: max(0.0, 1 - (t / 10) ** 2)  # noqa: E731
    sol = optimal_admission_oracle([0.0, 0.5, 1.0, 2.0], 4, reward, now=2.0)
    assert sol.order == (0, 1, 2, 3)


def test_oracle_edges():
    assert optimal_admission_oracle([0, 1], 0, linear_reward(), 1.0).order == ()
    with pytest.raises(QueueTooLarge):
        optimal_admission_oracle(list(range(11)), 2, linear_reward(), 11.0)
    with pytest.raises(ValueError):
        optimal_admission_oracle([0, 1], 3, linear_reward(), 1.0)
    sol = optimal_admission_oracle([0.0], 1, linear_reward(6), now=10.0)
    assert not sol.feasible


def random_reward(rng):
    kind = int(rng.integers(3))
    T = float(rng.uniform(2, 12))
    if kind == 0:
        return lambda t: max(0.0, 1 - t / T)
    if kind == 1:
        p = float(rng.uniform(1, 3))
        return lambda t: max(0.0, 1 - (max(t, 0.0) / T) ** p)
    flat = float(rng.uniform(0, T / 2))
    return lambda t: 1.0 if t <= flat else max(0.0, 1 - (t - flat) / (T - flat))


def test_most_recent_is_optimal_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        n = int(rng.integers(1, 8))
        arrivals = sorted(rng.uniform(0, 8, size=n).tolist())
        now = arrivals[-1] + float(rng.uniform(0, 2))
        l = int(rng.integers(0, n + 1))
        reward = random_reward(rng)
        best = optimal_admission_oracle(arrivals, l, reward, now)
        mine = most_recent_in_order(arrivals, l, reward, now)
        assert best.feasible == mine.feasible
        if best.feasible:
            assert mine.total_reward == pytest.approx(best.total_reward, abs=1e-9)


def test_estimate_serveable():
    assert estimate_serveable([], 0.0, 6.0, 2, 1.0) == 0
    fresh = [0.0] * 10
    assert estimate_serveable(fresh, 0.0, 3.0, 2, 1.0) == 6  # 2 per interval for 3 intervals
    assert estimate_serveable(fresh, 0.0, math.inf, 2, 1.0) == 10
    # stale requests are skipped without using a slot
    assert estimate_serveable([-10.0, -10.0, 0.0], 0.0, 3.0, 1, 1.0) == 1
    with pytest.raises(ValueError):
        estimate_serveable(fresh, 0.0, 3.0, 0, 1.0)


def test_request_remaining_appends():
    r = Request(0, "a", 0.0, 5, 4)
    assert r.remaining_appends == 3
    r.generated = 1
    assert r.remaining_appends == 3
    r.generated = 4
    assert r.remaining_appends == 0
