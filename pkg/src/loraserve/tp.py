"""Tensor-parallel partitioning of base + LoRA projections.

The base model follows the Megatron layout: the first projection is
column-partitioned, the second row-partitioned, and one all-reduce sums
the partial outputs.  The adapters are laid out to line up with it:

* first-projection adapters: ``A`` and ``B`` both column-partitioned, with
  an all-gather of the small ``x @ A`` intermediate in between;
* second-projection adapter: ``A`` row-partitioned (partial sums, one
  all-reduce of the ``(tokens, r)`` intermediate) and ``B``
  column-partitioned; each device adds its column block of the result
  into its base partial sum, so the all-gather that would collect it rides
  on the base all-reduce for free.

Collectives are emulated in-process with ring algorithms and every element
a device sends is counted, so measured volumes can be compared against the
closed forms.  All volumes are per device, as exact fractions.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .lora_math import forward_factored


class TPError(ValueError):
    pass


class IndivisibleDimension(TPError):
    pass


class ReplicationDetected(TPError):
    pass


class PlanShapeMismatch(TPError):
    pass


class Scheme(str, enum.Enum):
    COLUMN = "column"
    ROW = "row"
    REPLICATED = "replicated"
    PARTIAL_SUM = "partial_sum"


class CommKind(str, enum.Enum):
    ALL_REDUCE = "all_reduce"
    ALL_GATHER = "all_gather"


@dataclass(frozen=True)
class PartitionSpec:
    name: str
    scheme: Scheme
    global_shape: Tuple[int, int]
    per_device_shape: Tuple[int, int]
    is_weight: bool = True

    def __post_init__(self):
        g, p = self.global_shape, self.per_device_shape
        if self.scheme is Scheme.COLUMN:
            ok = p[0] == g[0] and g[1] % p[1] == 0
        elif self.scheme is Scheme.ROW:
            ok = p[1] == g[1] and g[0] % p[0] == 0
        else:
            ok = p == g
        if not ok:
            raise PlanShapeMismatch(f"{self.name}: {self.scheme.value} {p} does not tile {g}")

    @property
    def per_device_elements(self) -> int:
        return self.per_device_shape[0] * self.per_device_shape[1]

    @property
    def global_elements(self) -> int:
        return self.global_shape[0] * self.global_shape[1]


@dataclass(frozen=True)
class CommOp:
    name: str
    kind: CommKind
    payload_elements: int
    path: str  # "base" or "lora"
    fused_with: Optional[str] = None

    def __post_init__(self):
        if self.payload_elements <= 0:
            raise TPError(f"{self.name}: payload must be positive")

    def volume(self, n_devices: int) -> Fraction:
        """Elements each device sends; zero for ops folded into another."""
        if self.fused_with is not None:
            return Fraction(0)
        factor = 2 if self.kind is CommKind.ALL_REDUCE else 1
        return Fraction(factor * (n_devices - 1) * self.payload_elements, n_devices)


@dataclass
class PartitionPlan:
    layer: str
    n_devices: int
    dims: Dict[str, int]
    specs: List[PartitionSpec]
    comms: List[CommOp]

    def spec(self, name: str) -> PartitionSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in d["specs"]:
            s["scheme"] = s["scheme"].value
        for c in d["comms"]:
            c["kind"] = c["kind"].value
        return d


@dataclass(frozen=True)
class CostReport:
    base_comm_elements: Fraction
    lora_comm_elements: Fraction
    per_device_weight_elements: Optional[Fraction] = None

    @property
    def ratio(self) -> Optional[Fraction]:
        if self.base_comm_elements == 0:
            return None
        return self.lora_comm_elements / self.base_comm_elements

    def to_dict(self) -> dict:
        def num(v):
            if v is None:
                return None
            return int(v) if v.denominator == 1 else float(v)
        return {
            "base_comm_elements": num(self.base_comm_elements),
            "lora_comm_elements": num(self.lora_comm_elements),
            "per_device_weight_elements": num(self.per_device_weight_elements),
            "ratio": None if self.ratio is None else float(self.ratio),
        }


def _require_divisible(n: int, **dims: int) -> None:
    if n < 1:
        raise TPError("number of devices must be >= 1")
    for name, value in dims.items():
        if value % n:
            raise IndivisibleDimension(f"{name}={value} is not divisible by N={n}")


def _col(name, shape, n, is_weight=True):
    return PartitionSpec(name, Scheme.COLUMN, shape, (shape[0], shape[1] // n), is_weight)


def _row(name, shape, n, is_weight=True):
    return PartitionSpec(name, Scheme.ROW, shape, (shape[0] // n, shape[1]), is_weight)


def _act(name, scheme, shape, n):
    if scheme is Scheme.COLUMN:
        return _col(name, shape, n, is_weight=False)
    return PartitionSpec(name, scheme, shape, shape, is_weight=False)


def plan_mlp(h: int, d: int, r: int, n_devices: int, tokens: int = 1) -> PartitionPlan:
    """Partition a two-projection MLP (``h -> d -> h``) with one adapter per projection."""
    N = n_devices
    _require_divisible(N, h=h, d=d, r=r)
    specs = [
        _col("W1", (h, d), N), _row("W2", (d, h), N),
        _col("A1", (h, r), N), _col("B1", (r, d), N),
        _row("A2", (d, r), N), _col("B2", (r, h), N),
        _act("x", Scheme.REPLICATED, (tokens, h), N),
        _act("xA1", Scheme.COLUMN, (tokens, r), N),
        _act("hidden", Scheme.COLUMN, (tokens, d), N),
        _act("hA2", Scheme.PARTIAL_SUM, (tokens, r), N),
        _act("out", Scheme.PARTIAL_SUM, (tokens, h), N),
    ]
    comms = []
    if N > 1:
        comms = [
            CommOp("all_gather_xA1", CommKind.ALL_GATHER, tokens * r, "lora"),
            CommOp("all_reduce_hA2", CommKind.ALL_REDUCE, tokens * r, "lora"),
            CommOp("all_gather_lora2_out", CommKind.ALL_GATHER, tokens * h, "lora",
                   fused_with="all_reduce_out"),
            CommOp("all_reduce_out", CommKind.ALL_REDUCE, tokens * h, "base"),
        ]
    return PartitionPlan("mlp", N, {"h": h, "d": d, "r": r, "tokens": tokens}, specs, comms)


def plan_attention(h: int, r: int, n_devices: int, num_heads: int, tokens: int = 1) -> PartitionPlan:
    """Partition self-attention by heads: q/k/v play the first-projection role,
    the output projection the second."""
    N = n_devices
    if h % num_heads:
        raise TPError(f"h={h} is not a multiple of num_heads={num_heads}")
    _require_divisible(N, num_heads=num_heads, h=h, r=r)
    specs = []
    for p in ("q", "k", "v"):
        specs += [_col(f"W{p}", (h, h), N), _col(f"A{p}", (h, r), N), _col(f"B{p}", (r, h), N)]
    specs += [_row("Wo", (h, h), N), _row("Ao", (h, r), N), _col("Bo", (r, h), N)]
    specs += [
        _act("x", Scheme.REPLICATED, (tokens, h), N),
        _act("context", Scheme.COLUMN, (tokens, h), N),
        _act("out", Scheme.PARTIAL_SUM, (tokens, h), N),
    ]
    comms = []
    if N > 1:
        comms = [CommOp(f"all_gather_xA{p}", CommKind.ALL_GATHER, tokens * r, "lora")
                 for p in ("q", "k", "v")]
        comms += [
            CommOp("all_reduce_cAo", CommKind.ALL_REDUCE, tokens * r, "lora"),
            CommOp("all_gather_lora_o_out", CommKind.ALL_GATHER, tokens * h, "lora",
                   fused_with="all_reduce_out"),
            CommOp("all_reduce_out", CommKind.ALL_REDUCE, tokens * h, "base"),
        ]
    dims = {"h": h, "r": r, "num_heads": num_heads, "tokens": tokens}
    return PartitionPlan("attention", N, dims, specs, comms)


def comm_cost(n_devices: int, tokens: int, h: int, r: int, layer: str = "attention") -> CostReport:
    """Closed-form per-device communication of one layer.

    Base: one all-reduce of ``(tokens, h)``.  LoRA on attention: three
    all-gathers (q, k, v) plus one all-reduce of ``(tokens, r)``; on the MLP
    a single all-gather replaces the three.
    """
    N = n_devices
    if N < 1:
        raise TPError("number of devices must be >= 1")
    gathers = {"attention": 3, "mlp": 1}[layer]
    base = Fraction(2 * (N - 1) * tokens * h, N)
    lora = Fraction((gathers + 2) * (N - 1) * tokens * r, N)
    return CostReport(base, lora)


def plan_comm_volume(plan: PartitionPlan) -> CostReport:
    base = sum((c.volume(plan.n_devices) for c in plan.comms if c.path == "base"), Fraction(0))
    lora = sum((c.volume(plan.n_devices) for c in plan.comms if c.path == "lora"), Fraction(0))
    return CostReport(base, lora, memory_cost(plan))


def memory_cost(plan: PartitionPlan) -> Fraction:
    """Per-device weight elements; refuses plans that replicate a weight."""
    per_device = 0
    total = 0
    for s in plan.specs:
        if not s.is_weight:
            continue
        if s.scheme in (Scheme.REPLICATED, Scheme.PARTIAL_SUM) and plan.n_devices > 1:
            raise ReplicationDetected(f"weight {s.name} is {s.scheme.value}")
        per_device += s.per_device_elements
        total += s.global_elements
    if Fraction(total, plan.n_devices) != per_device:
        raise TPError("per-device weights do not partition the global weights")
    return Fraction(per_device)


# In-process collectives


@dataclass
class CommLog:
    n_devices: int
    sent: Dict[str, List[int]] = field(default_factory=dict)

    def record(self, name: str, device: int, elements: int) -> None:
        self.sent.setdefault(name, [0] * self.n_devices)[device] += elements

    def per_device(self, name: str) -> Fraction:
        return Fraction(sum(self.sent.get(name, [0])), self.n_devices)

    def total(self, names: Sequence[str]) -> Fraction:
        return sum((self.per_device(n) for n in names), Fraction(0))


def ring_all_reduce(parts: List[np.ndarray], log: CommLog, name: str) -> List[np.ndarray]:
    N = len(parts)
    if N == 1:
        return [parts[0].copy()]
    shape = parts[0].shape
    bounds = np.linspace(0, parts[0].size, N + 1).astype(int)
    bufs = [p.astype(np.float64).ravel().copy() for p in parts]

    def chunk(c):
        return slice(bounds[c], bounds[c + 1])

    # reduce-scatter: after N-1 steps device i owns the full sum of chunk (i+1) % N
    for step in range(N - 1):
        msgs = []
        for i in range(N):
            c = (i - step) % N
            msgs.append(((i + 1) % N, c, bufs[i][chunk(c)].copy()))
            log.record(name, i, msgs[-1][2].size)
        for dst, c, data in msgs:
            bufs[dst][chunk(c)] += data
    # all-gather of the reduced chunks
    for step in range(N - 1):
        msgs = []
        for i in range(N):
            c = (i + 1 - step) % N
            msgs.append(((i + 1) % N, c, bufs[i][chunk(c)].copy()))
            log.record(name, i, msgs[-1][2].size)
        for dst, c, data in msgs:
            bufs[dst][chunk(c)] = data
    return [b.reshape(shape) for b in bufs]


def ring_all_gather(parts: List[np.ndarray], log: CommLog, name: str, axis: int = 1) -> List[np.ndarray]:
    N = len(parts)
    have = [{i: parts[i]} for i in range(N)]
    for step in range(N - 1):
        msgs = []
        for i in range(N):
            c = (i - step) % N
            msgs.append(((i + 1) % N, c, have[i][c]))
            log.record(name, i, have[i][c].size)
        for dst, c, data in msgs:
            have[dst][c] = data
    return [np.concatenate([have[i][c] for c in range(N)], axis=axis) for i in range(N)]


def shard(a: np.ndarray, spec: PartitionSpec, n: int) -> List[np.ndarray]:
    if tuple(a.shape) != tuple(spec.global_shape):
        raise PlanShapeMismatch(f"{spec.name}: got {a.shape}, plan expects {spec.global_shape}")
    if spec.scheme is Scheme.COLUMN:
        return np.split(a, n, axis=1)
    if spec.scheme is Scheme.ROW:
        return np.split(a, n, axis=0)
    return [a] * n


def _fused_output(partials, lora_blocks, log, name):
    """Drop each device's LoRA column block into its base partial sum, then all-reduce."""
    N = len(partials)
    width = lora_blocks[0].shape[1]
    fused = []
    for k in range(N):
        p = partials[k].copy()
        p[:, k * width:(k + 1) * width] += lora_blocks[k]
        fused.append(p)
    outs = ring_all_reduce(fused, log, name)
    return outs


def emulate_plan(plan: PartitionPlan, x, W1, W2, A1, B1, A2, B2):
    """Run the MLP plan on ``plan.n_devices`` logical devices.

    Returns ``(output, CommLog)``; the output is checked to be identical on
    every device.
    """
    if plan.layer != "mlp":
        raise TPError("emulate_plan expects an MLP plan")
    N = plan.n_devices
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != plan.dims["h"]:
        raise PlanShapeMismatch(f"x has {x.shape[1]} cols, plan h={plan.dims['h']}")
    w = {n: shard(np.asarray(a, dtype=np.float64), plan.spec(n), N)
         for n, a in (("W1", W1), ("W2", W2), ("A1", A1), ("B1", B1), ("A2", A2), ("B2", B2))}
    log = CommLog(N)
    xa1 = [x @ w["A1"][k] for k in range(N)]
    xa1 = ring_all_gather(xa1, log, "all_gather_xA1") if N > 1 else xa1
    hidden = [x @ w["W1"][k] + xa1[k] @ w["B1"][k] for k in range(N)]
    partial = [hidden[k] @ w["W2"][k] for k in range(N)]
    ha2 = [hidden[k] @ w["A2"][k] for k in range(N)]
    ha2 = ring_all_reduce(ha2, log, "all_reduce_hA2") if N > 1 else ha2
    lora_out = [ha2[k] @ w["B2"][k] for k in range(N)]
    if N == 1:
        return partial[0] + lora_out[0], log
    outs = _fused_output(partial, lora_out, log, "all_reduce_out")
    _check_consistent(outs)
    return outs[0], log


def mlp_reference(x, W1, W2, A1, B1, A2, B2) -> np.ndarray:
    return forward_factored(forward_factored(x, W1, A1, B1), W2, A2, B2)


def multihead_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, num_heads: int) -> np.ndarray:
    """Non-causal softmax attention over the token axis, heads side by side in columns."""
    tokens, width = q.shape
    hd = width // num_heads
    out = np.empty_like(q)
    for head in range(num_heads):
        cols = slice(head * hd, (head + 1) * hd)
        scores = q[:, cols] @ k[:, cols].T / np.sqrt(hd)
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        out[:, cols] = p @ v[:, cols]
    return out


def attention_reference(x, weights: Dict[str, np.ndarray], num_heads: int) -> np.ndarray:
    q, k, v = (forward_factored(x, weights[f"W{p}"], weights[f"A{p}"], weights[f"B{p}"])
               for p in ("q", "k", "v"))
    ctx = multihead_attention(q, k, v, num_heads)
    return forward_factored(ctx, weights["Wo"], weights["Ao"], weights["Bo"])


def emulate_attention_plan(plan: PartitionPlan, x, weights: Dict[str, np.ndarray]):
    if plan.layer != "attention":
        raise TPError("emulate_attention_plan expects an attention plan")
    N = plan.n_devices
    heads_per_device = plan.dims["num_heads"] // N
    x = np.asarray(x, dtype=np.float64)
    w = {}
    for s in plan.specs:
        if s.is_weight:
            w[s.name] = shard(np.asarray(weights[s.name], dtype=np.float64), s, N)
    log = CommLog(N)
    proj = {}
    for p in ("q", "k", "v"):
        xa = [x @ w[f"A{p}"][k] for k in range(N)]
        xa = ring_all_gather(xa, log, f"all_gather_xA{p}") if N > 1 else xa
        proj[p] = [x @ w[f"W{p}"][k] + xa[k] @ w[f"B{p}"][k] for k in range(N)]
    ctx = [multihead_attention(proj["q"][k], proj["k"][k], proj["v"][k], heads_per_device)
           for k in range(N)]
    partial = [ctx[k] @ w["Wo"][k] for k in range(N)]
    ca = [ctx[k] @ w["Ao"][k] for k in range(N)]
    ca = ring_all_reduce(ca, log, "all_reduce_cAo") if N > 1 else ca
    lora_out = [ca[k] @ w["Bo"][k] for k in range(N)]
    if N == 1:
        return partial[0] + lora_out[0], log
    outs = _fused_output(partial, lora_out, log, "all_reduce_out")
    _check_consistent(outs)
    return outs[0], log


def observed_cost(plan: PartitionPlan, log: CommLog) -> CostReport:
    """Volumes actually sent during emulation, split by base/LoRA path."""
    base = [c.name for c in plan.comms if c.path == "base" and c.fused_with is None]
    lora = [c.name for c in plan.comms if c.path == "lora" and c.fused_with is None]
    return CostReport(log.total(base), log.total(lora), memory_cost(plan))


def _check_consistent(outs: List[np.ndarray]) -> None:
    for o in outs[1:]:
        if not np.array_equal(o, outs[0]):
            raise TPError("devices disagree after all-reduce")


def cost_table(hs: Sequence[int], ranks: Sequence[int], ns: Sequence[int], tokens: int = 1,
               layer: str = "attention") -> List[dict]:
    rows = []
    for h in hs:
        for r in ranks:
            for n in ns:
                rep = comm_cost(n, tokens, h, r, layer)
                rows.append({"layer": layer, "h": h, "r": r, "N": n, "tokens": tokens,
                             **rep.to_dict(),
                             "formula_ratio": float(Fraction(5 * r, 2 * h)) if layer == "attention"
                             else float(Fraction(3 * r, 2 * h))})
    return rows
