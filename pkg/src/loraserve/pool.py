"""Unified paging memory pool.

One statically sized buffer of pages, each page a single vector of
``page_size`` elements.  KV-cache tokens and low-rank adapter rows share
the same pages, so a request of sequence length ``S`` costs ``S`` pages per
layer and an adapter tensor of rank ``R`` costs ``R`` pages.  Pages are
handed out individually, which is why any ``k``-page request succeeds as
long as ``k`` pages are free, however scattered they are.

The pool is single-writer; callers serialise mutations.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Union

import numpy as np


class PoolError(Exception):
    pass


class InsufficientPages(PoolError):
    def __init__(self, needed: int, free: int):
        super().__init__(f"need {needed} pages, {free} free")
        self.needed = needed
        self.free = free


class StaleHandle(PoolError):
    pass


class AlreadyResident(PoolError):
    pass


class NotResident(PoolError):
    pass


class PinnedEviction(PoolError):
    pass


class NotPinned(PoolError):
    pass


class FreePageRead(PoolError):
    pass


class RowWidthError(PoolError):
    pass


@dataclass(frozen=True)
class KvOwner:
    request_id: Hashable
    layer: int
    position: int


@dataclass(frozen=True)
class AdapterOwner:
    adapter_id: Hashable
    tensor_id: int
    row_index: int


Owner = Optional[Union[KvOwner, AdapterOwner]]


@dataclass(eq=False)
class KvHandle:
    request_id: Hashable
    pages: List[List[int]]
    seq_len: int = 0
    live: bool = True

    @property
    def num_layers(self) -> int:
        return len(self.pages)

    @property
    def num_pages(self) -> int:
        return sum(len(layer) for layer in self.pages)


@dataclass(eq=False)
class AdapterHandle:
    adapter_id: Hashable
    rank: int
    tensor_pages: List[List[int]] = field(default_factory=list)

    @property
    def num_pages(self) -> int:
        return sum(len(t) for t in self.tensor_pages)


class PagePool:
    def __init__(self, page_size: int, capacity_pages: int, store_values: bool = True):
        if page_size < 1 or capacity_pages < 1:
            raise ValueError("page_size and capacity_pages must be >= 1")
        self.page_size = page_size
        self.capacity_pages = capacity_pages
        # The simulator only needs page accounting, not the values.
        self.page_store = np.zeros((capacity_pages, page_size)) if store_values else None
        self.page_table: List[Owner] = [None] * capacity_pages
        self.pinned: set = set()
        self._free = list(range(capacity_pages))  # min-heap of free page ids
        self._kv: Dict[Hashable, KvHandle] = {}
        self._adapters: Dict[Hashable, AdapterHandle] = {}

    @classmethod
    def from_budget(cls, budget_bytes: int, page_size: int, element_bytes: int = 2,
                    reserved_bytes: int = 0, store_values: bool = True) -> "PagePool":
        """Size the pool from a memory budget.

        ``reserved_bytes`` is held back for activations; there is no default
        for it because the right value depends on the deployment.
        """
        pages = (budget_bytes - reserved_bytes) // (page_size * element_bytes)
        return cls(page_size, int(pages), store_values=store_values)

    @property
    def free_pages(self) -> int:
        return len(self._free)

    @property
    def used_pages(self) -> int:
        return self.capacity_pages - len(self._free)

    def _take(self, count: int) -> List[int]:
        if count > len(self._free):
            raise InsufficientPages(count, len(self._free))
        return [heapq.heappop(self._free) for _ in range(count)]

    def _release(self, pages: Sequence[int]) -> None:
        for p in pages:
            self.page_table[p] = None
            heapq.heappush(self._free, p)

    # KV cache

    def alloc_kv(self, request_id: Hashable, initial_len: int, num_layers: int = 1) -> KvHandle:
        if request_id in self._kv:
            raise PoolError(f"request {request_id!r} already has a KV handle")
        if initial_len < 0 or num_layers < 1:
            raise ValueError("initial_len must be >= 0 and num_layers >= 1")
        pages = self._take(initial_len * num_layers)
        handle = KvHandle(request_id, [pages[i * initial_len:(i + 1) * initial_len]
                                       for i in range(num_layers)], initial_len)
        for layer, layer_pages in enumerate(handle.pages):
            for pos, p in enumerate(layer_pages):
                self.page_table[p] = KvOwner(request_id, layer, pos)
        self._kv[request_id] = handle
        return handle

    def _check_live(self, handle: KvHandle) -> None:
        if not handle.live or self._kv.get(handle.request_id) is not handle:
            raise StaleHandle(f"KV handle for {handle.request_id!r} is no longer live")

    def append_kv(self, handle: KvHandle, num_tokens: int = 1) -> None:
        self._check_live(handle)
        pages = self._take(num_tokens * handle.num_layers)
        it = iter(pages)
        for layer, layer_pages in enumerate(handle.pages):
            for i in range(num_tokens):
                p = next(it)
                self.page_table[p] = KvOwner(handle.request_id, layer, handle.seq_len + i)
                layer_pages.append(p)
        handle.seq_len += num_tokens

    def free_kv(self, handle: KvHandle) -> int:
        self._check_live(handle)
        released = 0
        for layer_pages in handle.pages:
            self._release(layer_pages)
            released += len(layer_pages)
        handle.live = False
        del self._kv[handle.request_id]
        return released

    def kv_handle(self, request_id: Hashable) -> KvHandle:
        return self._kv[request_id]

    # Adapters

    def is_resident(self, adapter_id: Hashable) -> bool:
        return adapter_id in self._adapters

    def adapter(self, adapter_id: Hashable) -> AdapterHandle:
        try:
            return self._adapters[adapter_id]
        except KeyError:
            raise NotResident(adapter_id) from None

    def resident_adapters(self) -> List[Hashable]:
        return list(self._adapters)

    def load_adapter(self, adapter_id: Hashable, rank: int, num_tensors: int,
                     weight_rows=None) -> AdapterHandle:
        """Load ``num_tensors`` low-rank tensors of ``rank`` rows each.

        ``weight_rows``, if given, has shape ``(num_tensors, rank, page_size)``
        and is written one row per page.  Without it the pages are only
        accounted for.
        """
        if adapter_id in self._adapters:
            raise AlreadyResident(adapter_id)
        if rank < 1 or num_tensors < 1:
            raise ValueError("rank and num_tensors must be >= 1")
        rows = None
        if weight_rows is not None:
            rows = np.asarray(weight_rows, dtype=np.float64)
            if rows.shape != (num_tensors, rank, self.page_size):
                raise RowWidthError(
                    f"weight rows have shape {rows.shape}, "
                    f"expected {(num_tensors, rank, self.page_size)}")
            if self.page_store is None:
                raise PoolError("pool was created without value storage")
        pages = self._take(rank * num_tensors)
        handle = AdapterHandle(adapter_id, rank)
        for t in range(num_tensors):
            tensor_pages = pages[t * rank:(t + 1) * rank]
            for i, p in enumerate(tensor_pages):
                self.page_table[p] = AdapterOwner(adapter_id, t, i)
                if rows is not None:
                    self.page_store[p] = rows[t, i]
            handle.tensor_pages.append(tensor_pages)
        self._adapters[adapter_id] = handle
        return handle

    def evict_adapter(self, adapter_id: Hashable) -> int:
        handle = self.adapter(adapter_id)
        if adapter_id in self.pinned:
            raise PinnedEviction(adapter_id)
        for tensor_pages in handle.tensor_pages:
            self._release(tensor_pages)
        del self._adapters[adapter_id]
        return handle.num_pages

    def pin(self, adapter_id: Hashable) -> None:
        if adapter_id not in self._adapters:
            raise NotResident(adapter_id)
        self.pinned.add(adapter_id)

    def unpin(self, adapter_id: Hashable) -> None:
        if adapter_id not in self.pinned:
            raise NotPinned(adapter_id)
        self.pinned.discard(adapter_id)

    # Reads and instrumentation

    def gather(self, page_ids: Sequence[int]) -> np.ndarray:
        if self.page_store is None:
            raise PoolError("pool was created without value storage")
        ids = list(page_ids)
        for p in ids:
            if self.page_table[p] is None:
                raise FreePageRead(p)
        if not ids:
            return np.zeros((0, self.page_size))
        return self.page_store[ids].copy()

    def fragmentation_report(self) -> dict:
        longest = run = 0
        histogram: Counter = Counter()
        for owner in self.page_table:
            if owner is None:
                run += 1
                longest = max(longest, run)
                histogram["free"] += 1
            else:
                run = 0
                histogram["kv" if isinstance(owner, KvOwner) else "adapter"] += 1
        return {
            "capacity": self.capacity_pages,
            "used": self.used_pages,
            "free": self.free_pages,
            "largest_contiguous_free_run": longest,
            "histogram": {k: histogram.get(k, 0) for k in ("free", "kv", "adapter")},
        }

    def fragmentation_json(self) -> str:
        return json.dumps(self.fragmentation_report(), sort_keys=True)

    def audit(self) -> None:
        """Check the owner table against handles and the free list; raise on drift."""
        free = set(self._free)
        if len(free) != len(self._free):
            raise AssertionError("duplicate page on free list")
        seen: Dict[int, object] = {}
        for h in self._kv.values():
            if len(h.pages) and any(len(layer) != h.seq_len for layer in h.pages):
                raise AssertionError(f"KV handle {h.request_id!r} page count != seq_len")
            for layer_pages in h.pages:
                for p in layer_pages:
                    if p in seen:
                        raise AssertionError(f"page {p} owned twice")
                    seen[p] = h
        for a in self._adapters.values():
            for tp in a.tensor_pages:
                if len(tp) != a.rank:
                    raise AssertionError(f"adapter {a.adapter_id!r} tensor has {len(tp)} pages")
                for p in tp:
                    if p in seen:
                        raise AssertionError(f"page {p} owned twice")
                    seen[p] = a
        for p, owner in enumerate(self.page_table):
            if (owner is None) != (p in free):
                raise AssertionError(f"page {p} owner/free-list mismatch")
            if owner is not None and p not in seen:
                raise AssertionError(f"page {p} owned by nobody's handle")
        if len(seen) + len(free) != self.capacity_pages:
            raise AssertionError("page conservation violated")
        for a in self.pinned:
            if a not in self._adapters:
                raise AssertionError(f"pinned adapter {a!r} not resident")


class ContiguousAllocator:
    """Best-fit allocator over contiguous extents.

    Exists to contrast with :class:`PagePool`: it fails whenever no single
    free extent is large enough, even if the total free space is.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._extents: List[List[int]] = [[0, capacity]]  # sorted [start, length]
        self._live: Dict[int, int] = {}

    @property
    def free_pages(self) -> int:
        return sum(length for _, length in self._extents)

    def alloc(self, size: int) -> int:
        best = None
        for i, (start, length) in enumerate(self._extents):
            if length >= size and (best is None or length < self._extents[best][1]):
                best = i
        if best is None:
            raise InsufficientPages(size, self.free_pages)
        start, length = self._extents[best]
        if length == size:
            del self._extents[best]
        else:
            self._extents[best] = [start + size, length - size]
        self._live[start] = size
        return start

    def free(self, start: int) -> int:
        size = self._live.pop(start)
        self._extents.append([start, size])
        self._extents.sort()
        merged: List[List[int]] = []
        for s, n in self._extents:
            if merged and merged[-1][0] + merged[-1][1] == s:
                merged[-1][1] += n
            else:
                merged.append([s, n])
        self._extents = merged
        return size
