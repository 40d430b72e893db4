import json

import numpy as np
import pytest
from hypothesis import settings, strategies as st
from hypothesis.stateful import Bundle, RuleBasedStateMachine, invariant, precondition, rule

from loraserve.pool import (
    AlreadyResident,
    ContiguousAllocator,
    FreePageRead,
    InsufficientPages,
    NotPinned,
    NotResident,
    PagePool,
    PinnedEviction,
    PoolError,
    RowWidthError,
    StaleHandle,
)


def test_kv_one_page_per_token():
    pool = PagePool(8, 32)
    h = pool.alloc_kv("r", 7)
    assert h.num_pages == 7 and pool.free_pages == 25
    assert pool.alloc_kv("empty", 0).num_pages == 0
    pool.audit()


def test_kv_multi_layer():
    pool = PagePool(4, 40)
    h = pool.alloc_kv("r", 5, num_layers=3)
    assert h.num_pages == 15
    pool.append_kv(h, 2)
    assert h.seq_len == 7 and h.num_pages == 21
    pool.audit()


def test_insufficient_pages_reports_counts():
    pool = PagePool(4, 5)
    with pytest.raises(InsufficientPages) as exc:
        pool.alloc_kv("r", 7)
    assert (exc.value.needed, exc.value.free) == (7, 5)
    assert pool.free_pages == 5  # nothing taken on failure


def test_stale_handle_after_free():
    pool = PagePool(4, 10)
    h = pool.alloc_kv("r", 3)
    assert pool.free_kv(h) == 3
    with pytest.raises(StaleHandle):
        pool.append_kv(h)
    with pytest.raises(StaleHandle):
        pool.free_kv(h)


def test_append_sixteen_tokens():
    pool = PagePool(4, 64)
    h = pool.alloc_kv("r", 1)
    for _ in range(16):
        pool.append_kv(h, 1)
    assert h.seq_len == 17 and h.num_pages == 17
    pool.audit()


def test_adapter_pages_rank_times_tensors():
    pool = PagePool(16, 200)
    h = pool.load_adapter("a", 8, 8)
    assert h.num_pages == 64
    assert pool.free_pages == 136
    with pytest.raises(AlreadyResident):
        pool.load_adapter("a", 8, 8)
    pool.audit()


def test_pin_blocks_eviction():
    pool = PagePool(4, 50)
    pool.load_adapter("a", 2, 2)
    pool.pin("a")
    with pytest.raises(PinnedEviction):
        pool.evict_adapter("a")
    pool.unpin("a")
    with pytest.raises(NotPinned):
        pool.unpin("a")
    assert pool.evict_adapter("a") == 4
    with pytest.raises(NotResident):
        pool.pin("a")
    with pytest.raises(NotResident):
        pool.evict_adapter("a")
    assert pool.free_pages == 50


def test_gather_round_trip_and_free_page_read():
    rng = np.random.default_rng(0)
    pool = PagePool(6, 40)
    rows = rng.standard_normal((2, 3, 6))
    h = pool.load_adapter("a", 3, 2, rows)
    for t in range(2):
        np.testing.assert_array_equal(pool.gather(h.tensor_pages[t]), rows[t])
    # gather returns a copy
    g = pool.gather(h.tensor_pages[0])
    g[:] = 0
    np.testing.assert_array_equal(pool.gather(h.tensor_pages[0]), rows[0])
    pool.evict_adapter("a")
    with pytest.raises(FreePageRead):
        pool.gather(h.tensor_pages[0])
    with pytest.raises(RowWidthError):
        pool.load_adapter("b", 3, 2, np.zeros((2, 3, 5)))


def test_from_budget_floor():
    # (10_000 - 1_000) // (64 * 2) = 70
    pool = PagePool.from_budget(10_000, 64, element_bytes=2, reserved_bytes=1_000, store_values=False)
    assert pool.capacity_pages == 70


def test_fragmentation_report_is_json():
    pool = PagePool(1, 10, store_values=False)
    pool.alloc_kv("r", 3)
    pool.load_adapter("a", 2, 1)
    rep = json.loads(pool.fragmentation_json())
    assert rep["histogram"] == {"free": 5, "kv": 3, "adapter": 2}
    assert rep["largest_contiguous_free_run"] == 5


def test_model_based_random_ops():
    """Every k-page request succeeds exactly when at least k pages are free."""
    rng = np.random.default_rng(42)
    cap = 300
    pool = PagePool(1, cap, store_values=False)
    model_used = 0
    kv, adapters = {}, set()
    for i in range(1000):
        op = rng.integers(5)
        if op == 0:
            k = int(rng.integers(0, 50))
            free = cap - model_used
            try:
                kv[i] = pool.alloc_kv(i, k)
                model_used += k
                assert k <= free
            except InsufficientPages:
                assert k > free
        elif op == 1 and kv:
            rid = list(kv)[int(rng.integers(len(kv)))]
            k = int(rng.integers(1, 10))
            try:
                pool.append_kv(kv[rid], k)
                model_used += k
            except InsufficientPages:
                assert k > cap - model_used
        elif op == 2 and kv:
            rid = list(kv)[int(rng.integers(len(kv)))]
            model_used -= pool.free_kv(kv.pop(rid))
        elif op == 3:
            r, t = int(rng.integers(1, 9)), int(rng.integers(1, 5))
            try:
                pool.load_adapter(i, r, t)
                adapters.add(i)
                model_used += r * t
            except InsufficientPages:
                assert r * t > cap - model_used
        elif op == 4 and adapters:
            a = sorted(adapters)[int(rng.integers(len(adapters)))]
            adapters.discard(a)
            model_used -= pool.evict_adapter(a)
        assert pool.used_pages == model_used
        pool.audit()


class PoolMachine(RuleBasedStateMachine):
    """Pin/evict fuzz: pinned adapters survive, pages are conserved."""

    kv = Bundle("kv")

    def __init__(self):
        super().__init__()
        self.pool = PagePool(1, 128, store_values=False)
        self.resident = {}
        self.pinned = set()
        self.n = 0

    @rule(target=kv, k=st.integers(0, 30))
    def alloc(self, k):
        self.n += 1
        free = self.pool.free_pages
        try:
            h = self.pool.alloc_kv(("r", self.n), k)
        except InsufficientPages:
            assert k > free
            h = None
        return h

    @rule(h=kv)
    def free(self, h):
        if h is None:
            return
        if h.live:
            self.pool.free_kv(h)
        else:
            with pytest.raises(StaleHandle):
                self.pool.free_kv(h)

    @rule(rank=st.integers(1, 6), tensors=st.integers(1, 4))
    def load(self, rank, tensors):
        self.n += 1
        try:
            self.pool.load_adapter(self.n, rank, tensors)
            self.resident[self.n] = rank * tensors
        except InsufficientPages:
            assert rank * tensors > self.pool.free_pages

    @precondition(lambda self: self.resident)
    @rule(data=st.data())
    def pin_or_evict(self, data):
        a = data.draw(st.sampled_from(sorted(self.resident)))
        action = data.draw(st.sampled_from(["pin", "unpin", "evict"]))
        if action == "pin":
            self.pool.pin(a)
            self.pinned.add(a)
        elif action == "unpin":
            if a in self.pinned:
                self.pool.unpin(a)
                self.pinned.discard(a)
            else:
                with pytest.raises(NotPinned):
                    self.pool.unpin(a)
        else:
            if a in self.pinned:
                with pytest.raises(PinnedEviction):
                    self.pool.evict_adapter(a)
            else:
                assert self.pool.evict_adapter(a) == self.resident.pop(a)

    @invariant()
    def consistent(self):
        self.pool.audit()
        for a in self.pinned:
            assert self.pool.is_resident(a)


TestPoolMachine = PoolMachine.TestCase
TestPoolMachine.settings = settings(max_examples=40, stateful_step_count=40, deadline=None)


def checkerboard(n):
    """Fill with unit blocks and free every other one."""
    paged, contig = PagePool(1, n, store_values=False), ContiguousAllocator(n)
    handles = [paged.alloc_kv(i, 1) for i in range(n)]
    starts = [contig.alloc(1) for _ in range(n)]
    for i in range(0, n, 2):
        paged.free_kv(handles[i])
        contig.free(starts[i])
    return paged, contig


def test_checkerboard_contrast():
    paged, contig = checkerboard(32)
    assert paged.free_pages == contig.free_pages == 16
    assert paged.fragmentation_report()["largest_contiguous_free_run"] == 1
    paged.alloc_kv("big", 16)  # scattered pages are fine
    with pytest.raises(InsufficientPages):
        contig.alloc(2)


def test_contiguous_allocator_coalesces():
    c = ContiguousAllocator(10)
    a, b, d = c.alloc(3), c.alloc(3), c.alloc(4)
    c.free(a)
    c.free(b)
    assert c.alloc(6) == 0  # freed neighbours merged
    with pytest.raises(InsufficientPages):
        c.alloc(1)
    c.free(d)
    assert c.free_pages == 4


def test_duplicate_kv_and_bad_sizes():
    pool = PagePool(1, 4, store_values=False)
    pool.alloc_kv("r", 1)
    with pytest.raises(PoolError):
        pool.alloc_kv("r", 1)
    with pytest.raises(ValueError):
        PagePool(0, 4)
    with pytest.raises(PoolError):
        pool.gather([0])  # no value storage
