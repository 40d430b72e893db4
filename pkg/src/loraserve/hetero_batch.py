"""Reference semantics for batched LoRA deltas over paged adapter weights.

A batch is a stack of activation rows split into segments, one per
request.  Each segment names the adapter it uses (or ``None`` for base
only traffic).  Adapter pages hold ``A`` transposed (``rank`` rows of
``h``) and ``B`` (``rank`` rows of ``d``), so both tensors are a list of
``rank`` page ids and the gather is a plain row lookup.

``mbgmm`` handles prefill segments of any length, ``mbgmv`` decode rows
of exactly one token.  ``padded_oracle`` is the pad-to-max-rank batched
formulation used as the independent check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .lora_math import PROJECTIONS, AdapterWeights, as_matrix
from .pool import AdapterHandle, PagePool


class BatchError(ValueError):
    pass


class SegmentOverlap(BatchError):
    pass


class SegmentGap(BatchError):
    pass


class NonResidentAdapter(BatchError):
    pass


class TokenCountNotOne(BatchError):
    pass


@dataclass(frozen=True)
class BatchSegment:
    request_id: Hashable
    adapter_id: Optional[Hashable]
    row_start: int
    token_count: int

    @property
    def row_stop(self) -> int:
        return self.row_start + self.token_count


@dataclass(frozen=True)
class GatheredAdapterRef:
    adapter_id: Hashable
    rank: int
    a_pages: Tuple[int, ...]
    b_pages: Tuple[int, ...]

    def __post_init__(self):
        if len(self.a_pages) != self.rank or len(self.b_pages) != self.rank:
            raise BatchError(f"adapter {self.adapter_id!r}: page lists do not match rank {self.rank}")


def segments_from_lengths(lengths: Sequence[int], adapter_ids: Sequence[Optional[Hashable]],
                          request_ids: Optional[Sequence[Hashable]] = None) -> List[BatchSegment]:
    request_ids = list(range(len(lengths))) if request_ids is None else request_ids
    segs, start = [], 0
    for rid, aid, n in zip(request_ids, adapter_ids, lengths):
        segs.append(BatchSegment(rid, aid, start, int(n)))
        start += int(n)
    return segs


def check_segments(segments: Iterable[BatchSegment], num_rows: int) -> List[BatchSegment]:
    ordered = sorted(segments, key=lambda s: s.row_start)
    cursor = 0
    for s in ordered:
        if s.token_count < 1:
            raise BatchError(f"segment {s.request_id!r} has token_count {s.token_count}")
        if s.row_start < cursor:
            raise SegmentOverlap(f"segment {s.request_id!r} starts at {s.row_start}, "
                                 f"previous ends at {cursor}")
        if s.row_start > cursor:
            raise SegmentGap(f"rows {cursor}..{s.row_start} not covered")
        cursor = s.row_stop
    if cursor != num_rows:
        raise SegmentGap(f"segments cover {cursor} rows, batch has {num_rows}")
    return ordered


def pack_adapter_rows(weights: AdapterWeights, projections: Sequence[str] = PROJECTIONS):
    """Rows to load into the pool and the tensor slot of each projection."""
    rows, layout = [], {}
    for proj in projections:
        if proj not in weights.pairs:
            continue
        A, B = weights.pairs[proj]
        layout[proj] = (len(rows), len(rows) + 1)
        rows.append(A.T)
        rows.append(B)
    return np.stack(rows), layout


def load_adapter_weights(pool: PagePool, weights: AdapterWeights,
                         projections: Sequence[str] = PROJECTIONS) -> Dict[str, GatheredAdapterRef]:
    """Load every enabled projection of ``weights`` and return per-projection refs."""
    rows, layout = pack_adapter_rows(weights, projections)
    handle = pool.load_adapter(weights.adapter_id, weights.rank, rows.shape[0], rows)
    return {proj: ref_from_handle(handle, ta, tb) for proj, (ta, tb) in layout.items()}


def ref_from_handle(handle: AdapterHandle, a_tensor: int, b_tensor: int) -> GatheredAdapterRef:
    return GatheredAdapterRef(handle.adapter_id, handle.rank,
                              tuple(handle.tensor_pages[a_tensor]),
                              tuple(handle.tensor_pages[b_tensor]))


def _gather_pair(ref: GatheredAdapterRef, pool: PagePool) -> Tuple[np.ndarray, np.ndarray]:
    if not pool.is_resident(ref.adapter_id):
        raise NonResidentAdapter(ref.adapter_id)
    a_t = pool.gather(ref.a_pages)  # (rank, h)
    b = pool.gather(ref.b_pages)    # (rank, d)
    return a_t, b


def _lookup(adapter_refs: Mapping[Hashable, GatheredAdapterRef], adapter_id) -> GatheredAdapterRef:
    try:
        return adapter_refs[adapter_id]
    except KeyError:
        raise NonResidentAdapter(adapter_id) from None


def mbgmm(x_batch, segments: Sequence[BatchSegment],
          adapter_refs: Mapping[Hashable, GatheredAdapterRef], pool: PagePool) -> np.ndarray:
    x = as_matrix(x_batch, "x_batch")
    ordered = check_segments(segments, x.shape[0])
    out = np.zeros((x.shape[0], pool.page_size))
    gathered: Dict[Hashable, Tuple[np.ndarray, np.ndarray]] = {}
    for seg in ordered:
        if seg.adapter_id is None:
            continue
        if seg.adapter_id not in gathered:
            gathered[seg.adapter_id] = _gather_pair(_lookup(adapter_refs, seg.adapter_id), pool)
        a_t, b = gathered[seg.adapter_id]
        rows = slice(seg.row_start, seg.row_stop)
        out[rows] = (x[rows] @ a_t.T) @ b
    return out


def mbgmv(x_rows, segments: Sequence[BatchSegment],
          adapter_refs: Mapping[Hashable, GatheredAdapterRef], pool: PagePool) -> np.ndarray:
    for seg in segments:
        if seg.token_count != 1:
            raise TokenCountNotOne(f"segment {seg.request_id!r} has {seg.token_count} tokens")
    x = as_matrix(x_rows, "x_rows")
    ordered = check_segments(segments, x.shape[0])
    out = np.zeros((x.shape[0], pool.page_size))
    for seg in ordered:
        if seg.adapter_id is None:
            continue
        a_t, b = _gather_pair(_lookup(adapter_refs, seg.adapter_id), pool)
        i = seg.row_start
        out[i] = (a_t @ x[i]) @ b
    return out


def unpadded_flops(segments: Sequence[BatchSegment], ranks: Mapping[Hashable, int],
                   h: int, d: int) -> int:
    return sum(2 * s.token_count * ranks[s.adapter_id] * (h + d)
               for s in segments if s.adapter_id is not None)


def padded_oracle(x_batch, segments: Sequence[BatchSegment],
                  adapters_dense: Mapping[Hashable, Tuple[np.ndarray, np.ndarray]],
                  out_dim: Optional[int] = None) -> Tuple[np.ndarray, int]:
    """Pad every adapter in the batch to the largest rank and compute uniformly.

    ``adapters_dense`` maps adapter id to dense ``(A, B)``.  Base-only rows use
    an all-zero padded adapter.  Returns ``(delta, padded_flops)``.
    """
    x = as_matrix(x_batch, "x_batch")
    if x.shape[0] == 0:
        return np.zeros((0, out_dim if out_dim is not None else x.shape[1])), 0
    ordered = check_segments(segments, x.shape[0])
    used = sorted({s.adapter_id for s in ordered if s.adapter_id is not None}, key=repr)
    h = x.shape[1]
    if used:
        d = adapters_dense[used[0]][1].shape[1]
        r_max = max(adapters_dense[a][0].shape[1] for a in used)
    else:
        d = out_dim if out_dim is not None else h
        r_max = 0
    # slot 0 is the zero adapter for base-only rows
    A_pad = np.zeros((len(used) + 1, h, r_max))
    B_pad = np.zeros((len(used) + 1, r_max, d))
    slot = {None: 0}
    for i, a in enumerate(used, start=1):
        A, B = adapters_dense[a]
        A_pad[i, :, :A.shape[1]] = A
        B_pad[i, :B.shape[0], :] = B
        slot[a] = i
    row_slot = np.empty(x.shape[0], dtype=np.int64)
    for s in ordered:
        row_slot[s.row_start:s.row_stop] = slot[s.adapter_id]
    xa = np.einsum("bh,bhr->br", x, A_pad[row_slot])
    delta = np.einsum("br,brd->bd", xa, B_pad[row_slot])
    flops = sum(2 * s.token_count * r_max * (h + d) for s in ordered if s.adapter_id is not None)
    return delta, flops
