"""Iteration-level serving engine driven by a parametric latency model.

Each call to :meth:`Engine.step` runs one iteration: either a prefill of a
freshly admitted minibatch (which yields every admitted request's first
token) or a decode step in which every running request yields one token.
New requests are fetched every ``fetch_interval`` decode steps, or
immediately when nothing is running.

Two execution modes:

``factored``
    Many adapters share a batch; LoRA deltas are computed on the fly and
    cost extra time per token-rank and per distinct adapter.  Adapters are
    paged into the unified pool on demand; loads overlap with the previous
    iteration when prefetching is on.
``merged``
    One adapter at a time is folded into the base weights, so the batch
    pays no LoRA cost but only holds that adapter's requests.  Switching
    waits for the batch to drain and then pays a merge cost.
"""

from __future__ import annotations

import enum
import logging
from collections import Counter, OrderedDict, deque
from dataclasses import dataclass
from typing import Callable, Hashable, List, Optional, Sequence

from .pool import PagePool
from .scheduler import (
    AdmissionState,
    Policy,
    Request,
    RequestState,
    SchedulerConfig,
    cluster_order,
    early_abort_filter,
    fcfs_order,
    lcfs_order,
)
from .workload import Trace, rank_for_adapter

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    FACTORED = "factored"
    MERGED = "merged"


@dataclass
class LatencyModel:
    """Synthetic cost constants, in seconds.  Not fitted to any hardware."""

    step_base: float = 0.03
    step_per_token: float = 0.001
    prefill_base: float = 0.02
    prefill_per_token: float = 1.5e-4
    lora_per_token_rank: float = 2e-7
    lora_per_adapter: float = 1e-4
    io_per_page: float = 1e-5
    merge_switch: float = 0.05
    prefetch: bool = True

    def decode_latency(self, batch_tokens: int, lora_token_rank: int = 0, distinct_adapters: int = 0) -> float:
        return (self.step_base + self.step_per_token * batch_tokens
                + self.lora_per_token_rank * lora_token_rank
                + self.lora_per_adapter * distinct_adapters)

    def prefill_latency(self, input_tokens: int, lora_token_rank: int = 0, distinct_adapters: int = 0) -> float:
        return (self.prefill_base + self.prefill_per_token * input_tokens
                + self.lora_per_token_rank * lora_token_rank
                + self.lora_per_adapter * distinct_adapters)

    def load_stall(self, pages: int, previous_step: float) -> float:
        load = pages * self.io_per_page
        return max(0.0, load - previous_step) if self.prefetch else load


class Deadlock(RuntimeError):
    pass


class Engine:
    def __init__(self, trace: Trace, ranks: Sequence[int], pool_pages: int = 16000,
                 config: Optional[SchedulerConfig] = None, latency: Optional[LatencyModel] = None,
                 mode: Mode = Mode.FACTORED, num_layers: int = 1, tensors_per_adapter: int = 8,
                 switch_threshold: int = 8, audit: bool = False):
        self.config = config or SchedulerConfig()
        self.latency = latency or LatencyModel()
        self.mode = Mode(mode)
        self.ranks = tuple(ranks)
        self.num_layers = num_layers
        self.tensors_per_adapter = tensors_per_adapter
        self.switch_threshold = switch_threshold
        self.audit = audit
        self.pool = PagePool(1, pool_pages, store_values=False)
        self.admission = AdmissionState(decay=self.config.ema_decay)

        self.requests = [Request(i, e.adapter_id, e.arrival_time, e.input_len, e.output_len)
                         for i, e in enumerate(trace.entries)]
        self.pending = deque(sorted(self.requests, key=Request.sort_key))
        self.waiting: List[Request] = []
        self.running: List[Request] = []
        self.events: List[dict] = []
        self.now = 0.0
        self.iterations = 0

        self._adapter_users: Counter = Counter()
        self._lru: "OrderedDict[Hashable, None]" = OrderedDict()  # resident, unpinned
        self._committed = 0  # KV pages promised to running requests but not yet appended
        self._prev_latency = 0.0
        self._decodes_since_fetch = 0
        self._arrivals_since_fetch = 0
        self.merged_adapter: Optional[Hashable] = None
        self._switch_pending = False
        self.switches = 0
        self.adapter_loads = 0
        self.insufficient_in_step = 0

    # bookkeeping

    def rank_of(self, adapter_id) -> int:
        return rank_for_adapter(adapter_id, self.ranks)

    def adapter_pages(self, adapter_id) -> int:
        if adapter_id is None:
            return 0
        return self.rank_of(adapter_id) * self.tensors_per_adapter * self.num_layers

    def _log(self, kind: str, r: Request, t: Optional[float] = None) -> None:
        self.events.append({"t": self.now if t is None else t, "event": kind,
                            "request_id": r.id, "adapter_id": r.adapter_id})

    def _abort(self, r: Request) -> None:
        r.state = RequestState.ABORTED
        self._log("abort", r)

    def _ingest(self) -> None:
        while self.pending and self.pending[0].arrival_time <= self.now:
            r = self.pending.popleft()
            self._log("arrival", r, r.arrival_time)
            self._arrivals_since_fetch += 1
            footprint = r.input_len + r.output_len - 1
            if self.mode is Mode.FACTORED:
                footprint += self.adapter_pages(r.adapter_id)
            if footprint * self.num_layers > self.pool.capacity_pages:
                self._abort(r)  # can never fit
                continue
            self.waiting.append(r)

    @property
    def done(self) -> bool:
        return not (self.pending or self.waiting or self.running)

    def available_pages(self) -> int:
        return self.pool.free_pages - self._committed * self.num_layers

    # admission

    def _ordered_candidates(self) -> List[Request]:
        policy = self.config.policy
        if policy is Policy.EARLY_ABORT:
            self.admission.observe_arrivals(self._arrivals_since_fetch)
            aborted, ordered = early_abort_filter(self.waiting, self.admission, self.now,
                                                  self.config.slo_first_token)
            for r in aborted:
                self.waiting.remove(r)
                self._abort(r)
            return ordered
        if policy is Policy.LCFS:
            return lcfs_order(self.waiting)
        return fcfs_order(self.waiting)

    def _merged_candidates(self, ordered: List[Request]) -> List[Request]:
        """Restrict to the merged adapter, switching adapters once the batch drains."""
        switch_cost = 0.0
        mine = [r for r in ordered if r.adapter_id == self.merged_adapter]
        if ordered and not self.running and (self.merged_adapter is None or self._switch_pending or not mine):
            counts = Counter(r.adapter_id for r in ordered)
            head = {}
            for r in fcfs_order(ordered):
                head.setdefault(r.adapter_id, r.sort_key())
            target = min(counts, key=lambda a: (-counts[a], head[a]))
            if target != self.merged_adapter:
                switch_cost = self.latency.merge_switch + self.adapter_pages(target) * self.latency.io_per_page
                self.merged_adapter = target
                self.switches += 1
            self._switch_pending = False
            mine = [r for r in ordered if r.adapter_id == self.merged_adapter]
        backlog = Counter(r.adapter_id for r in ordered if r.adapter_id != self.merged_adapter)
        if backlog:
            biggest = max(backlog.values())
            if biggest >= self.switch_threshold and biggest > len(mine):
                self._switch_pending = True
        self._pending_switch_cost = switch_cost
        return [] if self._switch_pending and self.running else mine

    def _make_room(self, needed: int, keep: Hashable) -> bool:
        short = needed - self.available_pages()
        if short <= 0:
            return True
        victims, freed = [], 0
        for a in self._lru:
            if a == keep:
                continue
            victims.append(a)
            freed += self.adapter_pages(a)
            if freed >= short:
                break
        if freed < short:
            return False
        for a in victims:
            self.pool.evict_adapter(a)
            del self._lru[a]
        return True

    def admit(self) -> List[Request]:
        """Admit waiting requests in policy order until something does not fit."""
        self._pending_switch_cost = 0.0
        ordered = self._ordered_candidates()
        if self.mode is Mode.MERGED:
            ordered = self._merged_candidates(ordered)
        else:
            running_adapters = {r.adapter_id for r in self.running}
            ordered = cluster_order(ordered, running_adapters, self.config.cluster_limit)

        admitted: List[Request] = []
        self._loaded_pages = 0
        tokens = 0
        for r in ordered:
            if admitted and tokens + r.input_len > self.config.batch_token_budget:
                break
            if (self.config.max_batch_size is not None
                    and len(self.running) + len(admitted) >= self.config.max_batch_size):
                break
            a = r.adapter_id
            need_adapter = (self.mode is Mode.FACTORED and a is not None
                            and not self.pool.is_resident(a))
            needed = (r.input_len + r.output_len - 1) * self.num_layers
            if need_adapter:
                needed += self.adapter_pages(a)
            if not self._make_room(needed, keep=a):
                break
            if self.mode is Mode.FACTORED and a is not None:
                if need_adapter:
                    self.pool.load_adapter(a, self.rank_of(a), self.tensors_per_adapter * self.num_layers)
                    self._loaded_pages += self.adapter_pages(a)
                    self.adapter_loads += 1
                if self._adapter_users[a] == 0:
                    self.pool.pin(a)
                    self._lru.pop(a, None)
                self._adapter_users[a] += 1
            r.kv = self.pool.alloc_kv(r.id, r.input_len, self.num_layers)
            r.generated = 0
            self._committed += r.remaining_appends
            r.state = RequestState.RUNNING
            r.admit_time = self.now
            self.waiting.remove(r)
            admitted.append(r)
            tokens += r.input_len
            self._log("admit", r)
        return admitted

    # iterations

    def _lora_terms(self, reqs: Sequence[Request], tokens_of: Callable[[Request], int]):
        if self.mode is Mode.MERGED:
            return 0, 0
        adapters = {r.adapter_id for r in reqs if r.adapter_id is not None}
        token_rank = sum(tokens_of(r) * self.rank_of(r.adapter_id) for r in reqs if r.adapter_id is not None)
        return token_rank, len(adapters)

    def _finish(self, r: Request) -> None:
        r.state = RequestState.FINISHED
        r.finish_time = self.now
        self.pool.free_kv(r.kv)
        r.kv = None
        self._log("finish", r)
        a = r.adapter_id
        if self.mode is Mode.FACTORED and a is not None:
            self._adapter_users[a] -= 1
            if self._adapter_users[a] == 0:
                del self._adapter_users[a]
                self.pool.unpin(a)
                self._lru[a] = None

    def _prefill(self, batch: List[Request]) -> float:
        token_rank, distinct = self._lora_terms(batch, lambda r: r.input_len)
        latency = self.latency.prefill_latency(sum(r.input_len for r in batch), token_rank, distinct)
        latency += self.latency.load_stall(self._loaded_pages, self._prev_latency)
        latency += self._pending_switch_cost
        self.now += latency
        self.admission.observe_prefill(latency)
        for r in batch:
            r.generated = 1
            r.first_token_time = self.now
            self._log("first_token", r)
            self.running.append(r)
        for r in [r for r in batch if r.generated >= r.output_len]:
            self.running.remove(r)
            self._finish(r)
        return latency

    def _decode(self) -> float:
        token_rank, distinct = self._lora_terms(self.running, lambda r: 1)
        latency = self.latency.decode_latency(len(self.running), token_rank, distinct)
        self.now += latency
        still = []
        for r in self.running:
            self.pool.append_kv(r.kv, 1)
            self._committed -= 1
            r.generated += 1
            if r.generated >= r.output_len:
                self._finish(r)
            else:
                still.append(r)
        self.running = still
        self._decodes_since_fetch += 1
        return latency

    def step(self) -> Optional[float]:
        """Run one iteration; returns its latency, or ``None`` once all work is done."""
        self._ingest()
        while not self.running and not self.waiting:
            if not self.pending:
                return None
            self.now = max(self.now, self.pending[0].arrival_time)
            self._ingest()
        latency = None
        if self.waiting and (not self.running or self._decodes_since_fetch >= self.config.fetch_interval):
            batch = self.admit()
            if self.config.policy is Policy.EARLY_ABORT:
                self.admission.observe_admitted(len(batch))
            self._arrivals_since_fetch = 0
            self._decodes_since_fetch = 0
            if batch:
                latency = self._prefill(batch)
            elif not self.running:
                if not self.waiting:
                    return self.step()
                raise Deadlock(f"nothing running and no waiting request fits at t={self.now}")
        if latency is None:
            latency = self._decode()
        self._prev_latency = latency
        self.iterations += 1
        if self.audit:
            self.pool.audit()
        return latency

    def run(self, max_iterations: Optional[int] = None) -> List[dict]:
        while self.step() is not None:
            if max_iterations is not None and self.iterations >= max_iterations:
                break
        return self.events


def simulate(trace: Trace, ranks: Sequence[int], **kwargs) -> Engine:
    engine = Engine(trace, ranks, **kwargs)
    engine.run()
    return engine
