"""Self-check harness behind ``loraserve verify``.

Each check is a named property run against frozen expected constants or
an independent reference implementation.  ``run_all`` returns one result
per check; a corrupted constant shows up as a failure of its own name.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional

import numpy as np

from . import hetero_batch as hb
from . import lora_math as lm
from . import tp
from .metrics import compute, linear_reward
from .pool import ContiguousAllocator, InsufficientPages, PagePool
from .scheduler import most_recent_in_order, optimal_admission_oracle
from .workload import gamma_arrivals, power_law_rates

# Hand-derived values the checks compare against.
EXPECTED: Dict[str, object] = {
    "power_law_n2_a1_R3": (2.0, 1.0),
    "kv_pages_seq7": 7,
    "adapter_pages_r8_t8": 64,
    "tp_base_volume_N2_B16_h4096": 65536,
    "tp_lora_volume_N2_B16_r8": 320,
    "tp_ratio_h4096_r8": Fraction(5, 1024),
    "oracle_order_n4_l2": (2, 3),
    "slo_attainment_5.9_6.1": 0.5,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


class CheckFailed(AssertionError):
    pass


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise CheckFailed(msg)


def _rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def check_constants() -> str:
    rates = power_law_rates(2, 1.0, 3.0)
    _expect(tuple(np.round(rates, 12)) == EXPECTED["power_law_n2_a1_R3"], f"power-law rates {rates}")
    pool = PagePool(4, 100)
    _expect(pool.alloc_kv("r", 7).num_pages == EXPECTED["kv_pages_seq7"], "kv pages for 7 tokens")
    _expect(pool.load_adapter("a", 8, 8).num_pages == EXPECTED["adapter_pages_r8_t8"], "adapter pages rank 8")
    return "3 constants"


def check_lora_equivalence(trials: int = 100) -> str:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(trials):
        h, d, r, t = (int(v) for v in rng.integers(1, [65, 65, 17, 9]))
        x, W = rng.standard_normal((t, h)), rng.standard_normal((h, d))
        A, B = rng.standard_normal((h, r)), rng.standard_normal((r, d))
        worst = max(worst, _rel_err(lm.forward_factored(x, W, A, B), lm.forward_merged(x, W, A, B)))
        worst = max(worst, _rel_err(lm.unmerge_adapter(lm.merge_adapter(W, A, B), A, B), W))
    _expect(worst <= 1e-9, f"max relative error {worst:.3g}")
    return f"max rel err {worst:.2e}"


def check_kernel_oracle(batches: int = 200) -> str:
    rng = np.random.default_rng(12)
    h = d = 64
    worst = 0.0
    for _ in range(batches):
        pool = PagePool(h, 4096)
        k = int(rng.integers(1, 6))
        adapters = {i: lm.AdapterWeights.random(i, int(rng.choice([8, 16, 32, 64])), h, d, rng,
                                                projections=("q",))
                    for i in range(k)}
        refs = {i: hb.load_adapter_weights(pool, w, ("q",))["q"] for i, w in adapters.items()}
        dense = {i: w.pairs["q"] for i, w in adapters.items()}
        lengths = [int(v) for v in rng.integers(1, 6, size=int(rng.integers(1, 8)))]
        ids = [int(rng.integers(0, k)) for _ in lengths]
        segs = hb.segments_from_lengths(lengths, ids)
        x = rng.standard_normal((sum(lengths), h))
        want, _ = hb.padded_oracle(x, segs, dense)
        worst = max(worst, _rel_err(hb.mbgmm(x, segs, refs, pool), want))
        segs1 = hb.segments_from_lengths([1] * len(ids), ids)
        x1 = rng.standard_normal((len(ids), h))
        want1, _ = hb.padded_oracle(x1, segs1, dense)
        worst = max(worst, _rel_err(hb.mbgmv(x1, segs1, refs, pool), want1))
    _expect(worst <= 1e-9, f"max relative error {worst:.3g}")
    return f"max rel err {worst:.2e}"


def check_pool_fragmentation(ops: int = 10_000) -> str:
    rng = np.random.default_rng(13)
    pool = PagePool(1, 512, store_values=False)
    live: List = []
    for i in range(ops):
        if live and rng.random() < 0.45:
            pool.free_kv(live.pop(int(rng.integers(len(live)))))
            continue
        k = int(rng.integers(1, 40))
        free = pool.free_pages
        try:
            live.append(pool.alloc_kv(i, k))
            ok = True
        except InsufficientPages:
            ok = False
        _expect(ok == (free >= k), f"op {i}: alloc {k} with {free} free -> {ok}")
    pool.audit()
    # checkerboard: fill with unit blocks, free every other one
    n = 64
    paged, contig = PagePool(1, n, store_values=False), ContiguousAllocator(n)
    handles = [paged.alloc_kv(i, 1) for i in range(n)]
    starts = [contig.alloc(1) for _ in range(n)]
    for i in range(0, n, 2):
        paged.free_kv(handles[i])
        contig.free(starts[i])
    paged.alloc_kv("big", n // 2)
    try:
        contig.alloc(n // 2)
        contrast = False
    except InsufficientPages:
        contrast = True
    _expect(contrast, "contiguous allocator did not fail on the checkerboard")
    return f"{ops} ops"


def _volumes(rep: tp.CostReport):
    return rep.base_comm_elements, rep.lora_comm_elements


def check_tp() -> str:
    rng = np.random.default_rng(14)
    for n in (1, 2, 4):
        h, d, r, tokens, heads = 16, 32, 8, 3, 4
        plan = tp.plan_mlp(h, d, r, n, tokens)
        mats = [rng.standard_normal(s) for s in ((tokens, h), (h, d), (d, h), (h, r), (r, d), (d, r), (r, h))]
        out, log = tp.emulate_plan(plan, *mats)
        _expect(_rel_err(out, tp.mlp_reference(*mats)) <= 1e-9, f"mlp output mismatch N={n}")
        _expect(_volumes(tp.observed_cost(plan, log)) == _volumes(tp.comm_cost(n, tokens, h, r, "mlp")),
                f"mlp volume N={n}")
        plan = tp.plan_attention(h, r, n, heads, tokens)
        weights = {}
        for p in "qkvo":
            weights["W" + p] = rng.standard_normal((h, h))
            weights["A" + p] = rng.standard_normal((h, r))
            weights["B" + p] = rng.standard_normal((r, h))
        x = rng.standard_normal((tokens, h))
        out, log = tp.emulate_attention_plan(plan, x, weights)
        _expect(_rel_err(out, tp.attention_reference(x, weights, heads)) <= 1e-9, f"attention output N={n}")
        _expect(_volumes(tp.observed_cost(plan, log)) == _volumes(tp.comm_cost(n, tokens, h, r)),
                f"attention volume N={n}")
    rep = tp.comm_cost(2, 16, 4096, 8)
    _expect(rep.base_comm_elements == EXPECTED["tp_base_volume_N2_B16_h4096"], f"base volume {rep.base_comm_elements}")
    _expect(rep.lora_comm_elements == EXPECTED["tp_lora_volume_N2_B16_r8"], f"lora volume {rep.lora_comm_elements}")
    _expect(rep.ratio == EXPECTED["tp_ratio_h4096_r8"], f"ratio {rep.ratio}")
    return f"ratio {rep.ratio} = {float(rep.ratio):.4%}"


def _random_concave(rng: np.random.Generator) -> Callable[[float], float]:
    kind = int(rng.integers(3))
    T = float(rng.uniform(2, 12))
    if kind == 0:
        return lambda t: max(0.0, 1 - t / T)
    if kind == 1:
        p = float(rng.uniform(1, 3))
        return lambda t: max(0.0, 1 - (max(t, 0.0) / T) ** p)
    flat = float(rng.uniform(0, T / 2))
    return lambda t: 1.0 if t <= flat else max(0.0, 1 - (t - flat) / (T - flat))


def check_admission_oracle(trials: int = 500) -> str:
    sol = optimal_admission_oracle([0, 1, 2, 3], 2, linear_reward(6), 4.0)
    _expect(sol.order == EXPECTED["oracle_order_n4_l2"], f"n=4 example order {sol.order}")
    rng = np.random.default_rng(15)
    checked = 0
    for _ in range(trials):
        n = int(rng.integers(1, 9))
        arrivals = sorted(float(v) for v in rng.uniform(0, 10, size=n))
        now = arrivals[-1]
        reward = _random_concave(rng)
        l = int(rng.integers(0, n + 1))
        best = optimal_admission_oracle(arrivals, l, reward, now)
        mine = most_recent_in_order(arrivals, l, reward, now)
        if not best.feasible:
            _expect(not mine.feasible, "heuristic feasible where oracle is not")
            continue
        _expect(mine.feasible and abs(best.total_reward - mine.total_reward) <= 1e-9,
                f"n={n} l={l}: oracle {best.total_reward} vs most-recent {mine.total_reward}")
        checked += 1
    return f"{checked} feasible instances"


def check_workload() -> str:
    for cv, seed in ((1.0, 1), (2.0, 2), (4.0, 3)):
        lam, D = 50.0, 200.0
        t = gamma_arrivals(lam, cv, D, seed)
        rate = len(t) / D
        gaps = np.diff(t)
        emp_cv = gaps.std() / gaps.mean()
        _expect(abs(rate - lam) <= 0.05 * lam, f"cv={cv}: rate {rate:.3f}")
        _expect(abs(emp_cv - cv) <= 0.1 * cv, f"cv={cv}: empirical cv {emp_cv:.3f}")
    s = power_law_rates(137, 0.7, 9.5).sum()
    _expect(abs(s - 9.5) <= 1e-12, f"sum of rates {s!r}")
    return "rate/cv within tolerance"


def check_metrics() -> str:
    log = []
    for rid, lat in enumerate((5.9, 6.1)):
        log += [{"t": 0.0, "event": "arrival", "request_id": rid, "adapter_id": 0},
                {"t": 0.0, "event": "admit", "request_id": rid, "adapter_id": 0},
                {"t": lat, "event": "first_token", "request_id": rid, "adapter_id": 0}]
    att = compute(log).slo_attainment
    _expect(att == EXPECTED["slo_attainment_5.9_6.1"], f"attainment {att}")
    return f"attainment {att}"


CHECKS: Dict[str, Callable[[], str]] = {
    "constants": check_constants,
    "lora.factored_equals_merged": check_lora_equivalence,
    "kernel.matches_padded_oracle": check_kernel_oracle,
    "pool.zero_external_fragmentation": check_pool_fragmentation,
    "tp.outputs_and_volumes": check_tp,
    "scheduler.most_recent_is_optimal": check_admission_oracle,
    "workload.rate_and_cv": check_workload,
    "metrics.slo_attainment": check_metrics,
}


def run_all(names: Optional[List[str]] = None) -> List[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except Exception as exc:  # any failure is reported against the check's name
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results
