"""Request types and admission policies.

The engine loop lives in :mod:`loraserve.engine`; this module holds the
pieces that decide *which* waiting requests get admitted: queue ordering
(FCFS, LCFS, early abort), adapter clustering, and the brute-force
admission oracle used to check the most-recent-``l`` rule.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Hashable, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .pool import KvHandle


class RequestState(str, enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    FINISHED = "finished"
    ABORTED = "aborted"


class Policy(str, enum.Enum):
    FCFS = "fcfs"
    LCFS = "lcfs"
    EARLY_ABORT = "early_abort"


class QueueTooLarge(ValueError):
    pass


@dataclass(eq=False)
class Request:
    id: int
    adapter_id: Optional[Hashable]
    arrival_time: float
    input_len: int
    output_len: int
    state: RequestState = RequestState.WAITING
    generated: int = 0
    admit_time: Optional[float] = None
    first_token_time: Optional[float] = None
    finish_time: Optional[float] = None
    kv: Optional[KvHandle] = field(default=None, repr=False)

    @property
    def remaining_appends(self) -> int:
        # the first token comes out of prefill; every later one appends one KV page
        return self.output_len - max(self.generated, 1)

    def sort_key(self):
        return (self.arrival_time, self.id)


@dataclass
class SchedulerConfig:
    policy: Policy = Policy.FCFS
    cluster_limit: Optional[int] = None
    slo_first_token: float = 6.0
    batch_token_budget: int = 4096
    max_batch_size: Optional[int] = None
    fetch_interval: int = 8
    ema_decay: float = 0.9

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.cluster_limit is not None and self.cluster_limit < 1:
            raise ValueError("cluster_limit must be >= 1")
        if self.slo_first_token <= 0:
            raise ValueError("slo_first_token must be positive")
        if self.fetch_interval < 1 or self.batch_token_budget < 1:
            raise ValueError("fetch_interval and batch_token_budget must be >= 1")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must be in [0, 1)")


@dataclass
class AdmissionState:
    """Moving-average queue pressure estimates used by early abort.

    ``r1_estimate``: requests joining the queue per fetch period.
    ``r2_estimate``: requests admitted per fetch period.
    ``l_prefill_max``: longest minibatch prefill seen so far.
    """

    r1_estimate: float = 0.0
    r2_estimate: float = 0.0
    l_prefill_max: float = 0.0
    decay: float = 0.9

    def observe_arrivals(self, count: int) -> None:
        self.r1_estimate = self.decay * self.r1_estimate + (1 - self.decay) * count

    def observe_admitted(self, count: int) -> None:
        self.r2_estimate = self.decay * self.r2_estimate + (1 - self.decay) * count

    def observe_prefill(self, latency: float) -> None:
        self.l_prefill_max = max(self.l_prefill_max, latency)

    @property
    def overloaded(self) -> bool:
        return self.r1_estimate > self.r2_estimate


def fcfs_order(queue: Iterable[Request]) -> List[Request]:
    return sorted(queue, key=Request.sort_key)


def lcfs_order(queue: Iterable[Request]) -> List[Request]:
    return sorted(queue, key=lambda r: (-r.arrival_time, r.id))


def early_abort_filter(queue: Iterable[Request], state: AdmissionState, now: float,
                       tl_max: float) -> Tuple[List[Request], List[Request]]:
    """Split ``queue`` into (aborted, remaining in admission order).

    A request is aborted when even an immediate prefill would land its first
    token past ``tl_max``.  The rest are ordered newest-first while arrivals
    outpace admissions, oldest-first otherwise.
    """
    aborted, keep = [], []
    for r in queue:
        (aborted if now - r.arrival_time + state.l_prefill_max > tl_max else keep).append(r)
    ordered = lcfs_order(keep) if state.overloaded else fcfs_order(keep)
    return fcfs_order(aborted), ordered


def cluster_order(ordered: Sequence[Request], running_adapters: Iterable[Hashable],
                  cluster_limit: Optional[int]) -> List[Request]:
    """Reorder candidates so the batch touches at most ``cluster_limit`` adapters.

    Requests whose adapter is already active (or that still fit under the
    limit) keep their policy order; the others are moved behind them and are
    only reached once every in-cluster candidate has been admitted.
    """
    if cluster_limit is None:
        return list(ordered)
    active: Set[Hashable] = {a for a in running_adapters if a is not None}
    first, deferred = [], []
    for r in ordered:
        a = r.adapter_id
        if a is None or a in active:
            first.append(r)
        elif len(active) < cluster_limit:
            active.add(a)
            first.append(r)
        else:
            deferred.append(r)
    return first + deferred


# Admission oracle under the unit-time serving model: one request is served
# per period of length 1 and the k-th served (0-based) gets its first token
# at ``now + k + 1``.


@dataclass(frozen=True)
class AdmissionSolution:
    order: Tuple[int, ...]
    total_reward: float
    feasible: bool

    @property
    def chosen(self) -> frozenset:
        return frozenset(self.order)


@lru_cache(maxsize=128)
def _permutations(n: int, l: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n), l)), dtype=np.int64).reshape(-1, l)


def _reward_table(arrivals: Sequence[float], l: int, reward_fn, now: float) -> np.ndarray:
    return np.array([[reward_fn(now + k + 1 - a) for k in range(l)] for a in arrivals], dtype=np.float64)


def optimal_admission_oracle(arrivals: Sequence[float], l: int,
                             reward_fn: Callable[[float], float], now: float,
                             max_queue: int = 10) -> AdmissionSolution:
    """Exhaustive search over every ordered choice of ``l`` requests.

    Maximises total reward subject to all ``l`` served requests having
    positive reward.  ``arrivals`` must be ascending; indices in the result
    refer to it.  Ties go to the lexicographically first order.  The
    reward is assumed non-increasing and concave on its support; that is
    not checked.
    """
    n = len(arrivals)
    if n > max_queue:
        raise QueueTooLarge(f"{n} requests; brute force is limited to {max_queue}")
    if not 0 <= l <= n:
        raise ValueError(f"l={l} outside 0..{n}")
    if l == 0:
        return AdmissionSolution((), 0.0, True)
    table = _reward_table(arrivals, l, reward_fn, now)
    perms = _permutations(n, l)
    picked = table[perms, np.arange(l)]
    feasible = (picked > 0).all(axis=1)
    if not feasible.any():
        return AdmissionSolution((), 0.0, False)
    totals = np.where(feasible, picked.sum(axis=1), -np.inf)
    best = totals.max()
    idx = int(np.flatnonzero(totals >= best - 1e-12)[0])
    return AdmissionSolution(tuple(int(i) for i in perms[idx]), float(totals[idx]), True)


def most_recent_in_order(arrivals: Sequence[float], l: int,
                         reward_fn: Callable[[float], float], now: float) -> AdmissionSolution:
    """Serve the newest ``l`` requests, oldest of them first."""
    n = len(arrivals)
    order = tuple(range(n - l, n))
    rewards = [reward_fn(now + k + 1 - arrivals[i]) for k, i in enumerate(order)]
    feasible = all(r > 0 for r in rewards)
    return AdmissionSolution(order, float(sum(rewards)) if feasible else 0.0, feasible)


def estimate_serveable(arrivals: Sequence[float], now: float, tl_max: float,
                       capacity_per_interval: int, interval: float) -> int:
    """How many queued requests an FCFS server gets to within ``tl_max``.

    The server starts ``capacity_per_interval`` requests per ``interval`` and
    a started request returns its first token at the end of that interval.
    Requests that would already miss are skipped without using a slot.
    """
    if capacity_per_interval < 1 or interval <= 0:
        raise ValueError("capacity_per_interval must be >= 1 and interval > 0")
    served = 0
    slot = 0
    for a in sorted(arrivals):
        if math.isinf(tl_max):
            served += 1
            continue
        done = now + (slot // capacity_per_interval + 1) * interval
        if done - a <= tl_max:
            served += 1
            slot += 1
    return served
