"""Dense reference for base-model and LoRA projections.

Matrices are plain float64 ``numpy`` arrays laid out row-major with
``x @ W`` semantics: activations are ``(tokens, h)``, a base weight is
``(h, d)``, and an adapter is the pair ``A (h, r)``, ``B (r, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

PROJECTIONS = ("q", "k", "v", "o")


class ShapeError(ValueError):
    pass


@dataclass
class OpCounter:
    """Tally of scalar multiply-adds, counted as 2 flops each, plus adds."""

    flops: int = 0

    def matmul(self, m: int, k: int, n: int) -> None:
        self.flops += 2 * m * k * n

    def add(self, m: int, n: int) -> None:
        self.flops += m * n


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} has non-finite entries")
    return arr


def _check_adapter(W: np.ndarray, A: np.ndarray, B: np.ndarray) -> None:
    h, d = W.shape
    if A.shape[0] != h:
        raise ShapeError(f"A has {A.shape[0]} rows, W has {h}")
    if B.shape[1] != d:
        raise ShapeError(f"B has {B.shape[1]} cols, W has {d}")
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"rank mismatch: A is {A.shape}, B is {B.shape}")


def forward_base(x, W, counter: Optional[OpCounter] = None) -> np.ndarray:
    x = as_matrix(x, "x")
    W = as_matrix(W, "W")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"x{x.shape} @ W{W.shape}")
    if counter is not None:
        counter.matmul(x.shape[0], x.shape[1], W.shape[1])
    return x @ W


def forward_factored(x, W, A, B, counter: Optional[OpCounter] = None) -> np.ndarray:
    """``xW + (xA)B`` without ever materialising ``W + AB``."""
    x, W, A, B = (as_matrix(m, n) for m, n in ((x, "x"), (W, "W"), (A, "A"), (B, "B")))
    _check_adapter(W, A, B)
    base = forward_base(x, W, counter)
    xa = x @ A
    delta = xa @ B
    if counter is not None:
        counter.matmul(x.shape[0], A.shape[0], A.shape[1])
        counter.matmul(x.shape[0], B.shape[0], B.shape[1])
        counter.add(*base.shape)
    return base + delta


def merge_adapter(W, A, B, counter: Optional[OpCounter] = None) -> np.ndarray:
    W, A, B = as_matrix(W, "W"), as_matrix(A, "A"), as_matrix(B, "B")
    _check_adapter(W, A, B)
    if counter is not None:
        counter.matmul(A.shape[0], A.shape[1], B.shape[1])
        counter.add(*W.shape)
    return W + A @ B


def unmerge_adapter(W_merged, A, B, counter: Optional[OpCounter] = None) -> np.ndarray:
    W, A, B = as_matrix(W_merged, "W_merged"), as_matrix(A, "A"), as_matrix(B, "B")
    _check_adapter(W, A, B)
    if counter is not None:
        counter.matmul(A.shape[0], A.shape[1], B.shape[1])
        counter.add(*W.shape)
    return W - A @ B


def forward_merged(x, W, A, B, counter: Optional[OpCounter] = None) -> np.ndarray:
    return forward_base(x, merge_adapter(W, A, B, counter), counter)


def factored_flops(tokens: int, h: int, d: int, r: int) -> int:
    """Closed-form flop count of one factored forward over ``tokens`` rows."""
    return 2 * tokens * h * d + 2 * tokens * h * r + 2 * tokens * r * d + tokens * d


def merged_flops(tokens: int, h: int, d: int, r: int, batches_per_merge: int = 1) -> float:
    """Per-batch flops of the merged path with one rebuild shared by
    ``batches_per_merge`` batches."""
    rebuild = 2 * h * r * d + h * d
    return 2 * tokens * h * d + rebuild / batches_per_merge


@dataclass(frozen=True)
class BaseModelConfig:
    hidden_in: int
    hidden_out: int
    num_layers: int = 1
    projections_per_layer: int = 4

    def __post_init__(self):
        for name in ("hidden_in", "hidden_out", "num_layers", "projections_per_layer"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class AdapterWeights:
    """Low-rank pairs for the attention projections of one adapter.

    ``pairs`` maps a projection name (``q``, ``k``, ``v``, ``o``) to ``(A, B)``.
    Projections can be left out to disable the adapter on them.
    """

    adapter_id: object
    rank: int
    pairs: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ShapeError("rank must be >= 1")
        for proj, (A, B) in list(self.pairs.items()):
            if proj not in PROJECTIONS:
                raise ShapeError(f"unknown projection {proj!r}")
            A, B = as_matrix(A, f"{proj}.A"), as_matrix(B, f"{proj}.B")
            if A.shape[1] != self.rank or B.shape[0] != self.rank:
                raise ShapeError(f"{proj}: A{A.shape}, B{B.shape} do not have rank {self.rank}")
            if self.rank > min(A.shape[0], B.shape[1]):
                raise ShapeError(f"{proj}: rank {self.rank} exceeds min(h, d)")
            self.pairs[proj] = (A, B)

    @classmethod
    def random(cls, adapter_id, rank: int, h: int, d: int, rng: np.random.Generator,
               projections=PROJECTIONS, scale: float = 1.0) -> "AdapterWeights":
        pairs = {
            p: (scale * rng.standard_normal((h, rank)), scale * rng.standard_normal((rank, d)))
            for p in projections
        }
        return cls(adapter_id, rank, pairs)

    @property
    def num_tensors(self) -> int:
        return 2 * len(self.pairs)

    def delta(self, x, projection: str) -> np.ndarray:
        """``x A B`` for one projection; zeros when the projection is disabled."""
        x = as_matrix(x, "x")
        if projection not in self.pairs:
            d = next(iter(self.pairs.values()))[1].shape[1] if self.pairs else x.shape[1]
            return np.zeros((x.shape[0], d))
        A, B = self.pairs[projection]
        return (x @ A) @ B
