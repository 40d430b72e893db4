"""Serving metrics computed from a scheduler event log.

Each event is a record ``{"t", "event", "request_id", "adapter_id"}`` where
``event`` is one of ``arrival``, ``admit``, ``abort``, ``first_token`` and
``finish``.  Aborted requests count in the denominators of SLO attainment
and satisfaction (as misses) but not in the latency averages.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional

DEFAULT_SLO = 6.0
CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "schema_version", "label", "num_requests", "num_finished", "num_aborted",
    "duration", "throughput", "avg_request_latency", "avg_first_token_latency",
    "slo_attainment", "avg_satisfaction", "abort_rate",
)

EVENT_KINDS = ("arrival", "admit", "abort", "first_token", "finish")


class InconsistentLog(ValueError):
    pass


def linear_reward(tl_max: float = DEFAULT_SLO) -> Callable[[float], float]:
    """``max(0, 1 - t / tl_max)``: 1 at zero latency, 0 from the SLO on."""
    def reward(t: float) -> float:
        return max(0.0, 1.0 - t / tl_max)
    return reward


@dataclass
class AdapterBreakdown:
    num_requests: int = 0
    num_finished: int = 0
    num_aborted: int = 0
    slo_attainment: float = 0.0
    avg_first_token_latency: Optional[float] = None


@dataclass
class MetricsReport:
    num_requests: int
    num_finished: int
    num_aborted: int
    duration: float
    throughput: float
    avg_request_latency: Optional[float]
    avg_first_token_latency: Optional[float]
    slo_attainment: float
    avg_satisfaction: float
    abort_rate: float
    per_adapter: Dict[str, AdapterBreakdown] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_row(self, label: str = "") -> dict:
        d = self.to_dict()
        return {"schema_version": CSV_SCHEMA_VERSION, "label": label,
                **{c: d[c] for c in CSV_COLUMNS if c in d}}


def write_csv(rows: Iterable[Mapping], extra_columns: Iterable[str] = ()) -> str:
    extra = list(extra_columns)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=extra + list(CSV_COLUMNS), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    return buf.getvalue()


def read_event_log(text: str) -> List[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def _mean(values: List[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def compute(event_log: Iterable[Mapping], slo_seconds: float = DEFAULT_SLO,
            reward_fn: Optional[Callable[[float], float]] = None,
            duration: Optional[float] = None) -> MetricsReport:
    """Summarise an event log.

    ``duration`` defaults to the span from the first arrival to the last
    event; throughput is finished requests over that span.
    """
    reward_fn = reward_fn or linear_reward(slo_seconds)
    reqs: Dict[object, dict] = {}
    t_min, t_max = None, None
    for ev in event_log:
        kind = ev["event"]
        if kind not in EVENT_KINDS:
            raise InconsistentLog(f"unknown event kind {kind!r}")
        rid, t = ev["request_id"], float(ev["t"])
        t_max = t if t_max is None else max(t_max, t)
        r = reqs.setdefault(rid, {"adapter_id": ev.get("adapter_id")})
        if kind in r:
            raise InconsistentLog(f"request {rid!r}: duplicate {kind}")
        r[kind] = t
        if kind == "arrival":
            t_min = t if t_min is None else min(t_min, t)

    finished_lat, ftl = [], []
    attained = 0
    satisfaction = 0.0
    n_finished = n_aborted = 0
    per_adapter: Dict[str, dict] = {}
    for rid, r in reqs.items():
        if "arrival" not in r:
            raise InconsistentLog(f"request {rid!r} has no arrival")
        if ("finish" in r or "first_token" in r) and "admit" not in r:
            raise InconsistentLog(f"request {rid!r} produced output without being admitted")
        if "abort" in r and ("admit" in r or "finish" in r):
            raise InconsistentLog(f"request {rid!r} is both aborted and served")
        if "finish" in r and "first_token" not in r:
            raise InconsistentLog(f"request {rid!r} finished without a first token")
        times = [r.get(k) for k in ("arrival", "admit", "first_token", "finish") if k in r]
        if times != sorted(times):
            raise InconsistentLog(f"request {rid!r} has non-monotone timestamps")

        pa = per_adapter.setdefault(str(r["adapter_id"]), {"n": 0, "fin": 0, "ab": 0, "ok": 0, "ftl": []})
        pa["n"] += 1
        if "abort" in r:
            n_aborted += 1
            pa["ab"] += 1
            continue
        if "first_token" in r:
            latency = r["first_token"] - r["arrival"]
            ftl.append(latency)
            pa["ftl"].append(latency)
            if latency <= slo_seconds:
                attained += 1
                pa["ok"] += 1
                satisfaction += reward_fn(latency)
        if "finish" in r:
            n_finished += 1
            pa["fin"] += 1
            finished_lat.append(r["finish"] - r["arrival"])

    n = len(reqs)
    if duration is None:
        duration = (t_max - t_min) if n else 0.0
    return MetricsReport(
        num_requests=n,
        num_finished=n_finished,
        num_aborted=n_aborted,
        duration=duration,
        throughput=n_finished / duration if duration > 0 else 0.0,
        avg_request_latency=_mean(finished_lat),
        avg_first_token_latency=_mean(ftl),
        slo_attainment=attained / n if n else 0.0,
        avg_satisfaction=satisfaction / n if n else 0.0,
        abort_rate=n_aborted / n if n else 0.0,
        per_adapter={
            k: AdapterBreakdown(v["n"], v["fin"], v["ab"], v["ok"] / v["n"], _mean(v["ftl"]))
            for k, v in sorted(per_adapter.items())
        },
    )
