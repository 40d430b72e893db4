"""Request traces: synthetic Gamma-process workloads and downsampled real logs.

Trace file format (UTF-8, one record per line)::

    {"kind": "synthetic", ...metadata as JSON...}
    time_s,adapter_id,input_len,output_len
    0.4182...,17,233,90
    ...
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

TRACE_COLUMNS = ("time_s", "adapter_id", "input_len", "output_len")


class TraceError(ValueError):
    pass


class InsufficientLog(TraceError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    arrival_time: float
    adapter_id: int
    input_len: int
    output_len: int


@dataclass
class Trace:
    entries: List[TraceEntry]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def duration(self) -> float:
        return float(self.metadata.get("duration", self.entries[-1].arrival_time if self.entries else 0.0))

    def adapter_ids(self) -> List[int]:
        return sorted({e.adapter_id for e in self.entries})

    def validate(self) -> None:
        prev = -math.inf
        for e in self.entries:
            if e.arrival_time < prev:
                raise TraceError("arrival times are not sorted")
            prev = e.arrival_time
            if e.input_len < 1 or e.output_len < 1:
                raise TraceError(f"non-positive length in {e}")
        for key, col in (("input_range", "input_len"), ("output_range", "output_len")):
            if key in self.metadata:
                lo, hi = self.metadata[key]
                if any(not lo <= getattr(e, col) <= hi for e in self.entries):
                    raise TraceError(f"{col} outside declared {key} {lo}..{hi}")

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(json.dumps(self.metadata, sort_keys=True) + "\n")
        buf.write(",".join(TRACE_COLUMNS) + "\n")
        for e in self.entries:
            buf.write(f"{e.arrival_time!r},{e.adapter_id},{e.input_len},{e.output_len}\n")
        return buf.getvalue()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Trace":
        lines = text.splitlines()
        if len(lines) < 2:
            raise TraceError("trace needs a metadata line and a column header")
        metadata = json.loads(lines[0])
        if tuple(lines[1].split(",")) != TRACE_COLUMNS:
            raise TraceError(f"unexpected trace header {lines[1]!r}")
        entries = []
        for n, line in enumerate(lines[2:], start=3):
            if not line.strip():
                continue
            try:
                t, a, i, o = line.split(",")
                entries.append(TraceEntry(float(t), int(a), int(i), int(o)))
            except ValueError as exc:
                raise TraceError(f"line {n}: {exc}") from None
        return cls(entries, metadata)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Trace":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


@dataclass
class SyntheticConfig:
    n_adapters: int = 200
    alpha: float = 1.0
    total_rate: float = 2.0
    cv: float = 1.0
    input_range: Tuple[int, int] = (8, 512)
    output_range: Tuple[int, int] = (8, 512)
    duration: float = 300.0
    seed: int = 0

    def __post_init__(self):
        self.input_range = tuple(self.input_range)
        self.output_range = tuple(self.output_range)
        if self.n_adapters < 1:
            raise TraceError("n_adapters must be >= 1")
        if self.alpha <= 0 or self.total_rate <= 0 or self.cv <= 0 or self.duration <= 0:
            raise TraceError("alpha, total_rate, cv and duration must be positive")
        for name, (lo, hi) in (("input_range", self.input_range), ("output_range", self.output_range)):
            if not 1 <= lo <= hi:
                raise TraceError(f"{name} must satisfy 1 <= lower <= upper, got {lo}..{hi}")


# Standard workloads, keyed by "<model>-<gpu>".
WORKLOAD_PRESETS = {
    "7b-a10g": SyntheticConfig(n_adapters=200, alpha=1, total_rate=2, cv=1),
    "7b-a100-80g": SyntheticConfig(n_adapters=200, alpha=1, total_rate=10, cv=1),
    "13b-a100-40g": SyntheticConfig(n_adapters=200, alpha=1, total_rate=2, cv=1),
    "13b-a100-80g": SyntheticConfig(n_adapters=400, alpha=1, total_rate=6, cv=1),
}


def power_law_rates(n: int, alpha: float, total_rate: float) -> np.ndarray:
    """Per-adapter rates proportional to ``i ** -alpha`` for ``i = 1..n``, summing to ``total_rate``."""
    if n < 1:
        raise TraceError("n must be >= 1")
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(alpha)
    return total_rate * w / w.sum()


def gamma_arrivals(rate: float, cv: float, duration: float,
                   seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """Arrival times in ``[0, duration)`` of a renewal process with Gamma gaps.

    Gaps have mean ``1/rate`` and coefficient of variation ``cv``
    (shape ``1/cv**2``, scale ``cv**2/rate``).  The process is observed in
    its stationary regime: the first arrival is the forward recurrence time
    (a uniform fraction of a length-biased ``Gamma(shape + 1)`` interval),
    so the expected count in the window is exactly ``rate * duration``.
    Starting with a fresh gap at zero instead would add ``(cv**2 - 1) / 2``
    arrivals on average, which dominates for bursty low-rate adapters.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rate <= 0:
        return np.zeros(0)
    shape, scale = 1.0 / cv ** 2, cv ** 2 / rate
    times: List[np.ndarray] = []
    t = rng.uniform() * rng.gamma(shape + 1.0, scale)
    if t >= duration:
        return np.zeros(0)
    batch = max(16, int(rate * duration * 1.2) + 16)
    first = True
    while True:
        gaps = rng.gamma(shape, scale, size=batch)
        if first:
            gaps[0] = 0.0
            first = False
        arr = t + np.cumsum(gaps)
        keep = arr[arr < duration]
        times.append(keep)
        if len(keep) < len(arr):
            break
        t = arr[-1]
    return np.concatenate(times)


def rank_for_adapter(adapter_id: int, ranks: Sequence[int]) -> int:
    """Round-robin rank assignment over the setting's rank list."""
    return ranks[adapter_id % len(ranks)]


def gen_synthetic(config: SyntheticConfig, ranks: Optional[Sequence[int]] = None) -> Trace:
    rates = power_law_rates(config.n_adapters, config.alpha, config.total_rate)
    root = np.random.SeedSequence(config.seed)
    arrival_ss, length_ss = root.spawn(2)
    times, adapters = [], []
    for i, (lam, ss) in enumerate(zip(rates, arrival_ss.spawn(config.n_adapters))):
        t = gamma_arrivals(lam, config.cv, config.duration, np.random.default_rng(ss))
        times.append(t)
        adapters.append(np.full(len(t), i, dtype=np.int64))
    t_all = np.concatenate(times)
    a_all = np.concatenate(adapters)
    order = np.lexsort((a_all, t_all))
    rng = np.random.default_rng(length_ss)
    n = len(order)
    ins = rng.integers(config.input_range[0], config.input_range[1] + 1, size=n)
    outs = rng.integers(config.output_range[0], config.output_range[1] + 1, size=n)
    entries = [TraceEntry(float(t_all[j]), int(a_all[j]), int(ins[k]), int(outs[k]))
               for k, j in enumerate(order)]
    meta = {"kind": "synthetic", **asdict(config)}
    meta["input_range"] = list(config.input_range)
    meta["output_range"] = list(config.output_range)
    if ranks is not None:
        meta["ranks"] = list(ranks)
    return Trace(entries, meta)


@dataclass(frozen=True)
class RawLogEntry:
    timestamp: float
    model_name: str
    input_len: int
    output_len: int


def read_raw_log(path: Union[str, Path], delimiter: str = ",") -> List[RawLogEntry]:
    """Read a delimited log with columns ``timestamp, model_name, input_len, output_len``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        return [RawLogEntry(float(row["timestamp"]), row["model_name"],
                            int(row["input_len"]), int(row["output_len"])) for row in reader]


def downsample_real(raw_log: Sequence[RawLogEntry], rate: float, duration: float,
                    seed: int = 0) -> Trace:
    """Sample ``rate * duration`` entries and rescale their timestamps onto ``[0, duration]``.

    Model names become adapter ids, most frequent first.
    """
    k = int(round(rate * duration))
    if k < 1 or len(raw_log) < k:
        raise InsufficientLog(f"need {k} entries, log has {len(raw_log)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(raw_log), size=k, replace=False))
    picked = sorted((raw_log[i] for i in idx), key=lambda e: e.timestamp)
    counts = Counter(e.model_name for e in picked)
    ids = {name: i for i, (name, _) in enumerate(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))}
    t0, t1 = picked[0].timestamp, picked[-1].timestamp
    span = t1 - t0
    entries = [TraceEntry((e.timestamp - t0) / span * duration if span > 0 else 0.0,
                          ids[e.model_name], e.input_len, e.output_len) for e in picked]
    meta = {"kind": "real", "rate": rate, "duration": duration, "seed": seed,
            "n_adapters": len(ids), "adapter_names": {str(v): k for k, v in ids.items()}}
    return Trace(entries, meta)

