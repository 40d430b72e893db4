"""Experiment configuration (YAML on disk, validated with pydantic)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .engine import LatencyModel, Mode
from .scheduler import Policy, SchedulerConfig
from .settings import SETTINGS
from .workload import SyntheticConfig

OUTPUT_DIR_ENV = "LORASERVE_OUTPUT_DIR"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SchedulerSection(_Strict):
    policy: Policy = Policy.FCFS
    cluster_limit: Optional[int] = Field(None, ge=1)
    slo_first_token: float = Field(6.0, gt=0)
    batch_token_budget: int = Field(4096, ge=1)
    max_batch_size: Optional[int] = Field(None, ge=1)
    fetch_interval: int = Field(8, ge=1)
    ema_decay: float = Field(0.9, ge=0, lt=1)

    def build(self) -> SchedulerConfig:
        return SchedulerConfig(**self.model_dump())


class LatencySection(_Strict):
    step_base: float = Field(0.03, ge=0)
    step_per_token: float = Field(0.001, ge=0)
    prefill_base: float = Field(0.02, ge=0)
    prefill_per_token: float = Field(1.5e-4, ge=0)
    lora_per_token_rank: float = Field(2e-7, ge=0)
    lora_per_adapter: float = Field(1e-4, ge=0)
    io_per_page: float = Field(1e-5, ge=0)
    merge_switch: float = Field(0.05, ge=0)
    prefetch: bool = True

    def build(self) -> LatencyModel:
        return LatencyModel(**self.model_dump())


class WorkloadSection(_Strict):
    preset: Optional[str] = None
    n_adapters: int = Field(200, ge=1)
    alpha: float = Field(1.0, gt=0)
    total_rate: float = Field(2.0, gt=0)
    cv: float = Field(1.0, gt=0)
    input_range: Tuple[int, int] = (8, 512)
    output_range: Tuple[int, int] = (8, 512)
    duration: float = Field(300.0, gt=0)

    @field_validator("input_range", "output_range")
    @classmethod
    def _range(cls, v):
        lo, hi = v
        if not 1 <= lo <= hi:
            raise ValueError(f"range must satisfy 1 <= lower <= upper, got {lo}..{hi}")
        return v

    @field_validator("preset")
    @classmethod
    def _preset(cls, v):
        from .workload import WORKLOAD_PRESETS
        if v is not None and v not in WORKLOAD_PRESETS:
            raise ValueError(f"unknown preset {v!r}; known: {', '.join(WORKLOAD_PRESETS)}")
        return v

    @model_validator(mode="before")
    @classmethod
    def _apply_preset(cls, data):
        # preset values are defaults; explicit keys still win
        if isinstance(data, dict) and data.get("preset"):
            from dataclasses import asdict
            from .workload import WORKLOAD_PRESETS
            base = WORKLOAD_PRESETS.get(data["preset"])
            if base is not None:
                merged = {k: v for k, v in asdict(base).items() if k != "seed"}
                merged.update(data)
                return merged
        return data

    def build(self, seed: int) -> SyntheticConfig:
        d = self.model_dump(exclude={"preset"})
        return SyntheticConfig(seed=seed, **d)


class ExperimentConfig(_Strict):
    label: str = "run"
    setting: str = "S2"
    mode: Mode = Mode.FACTORED
    pool_pages: int = Field(16000, ge=1)
    switch_threshold: int = Field(8, ge=1)
    seed: int = 0
    trace_path: Optional[Path] = None
    output_dir: Path = Path("out")
    scheduler: SchedulerSection = SchedulerSection()
    latency: LatencySection = LatencySection()
    workload: WorkloadSection = WorkloadSection()
    sweep: Dict[str, List[Any]] = Field(default_factory=dict)

    @field_validator("setting")
    @classmethod
    def _setting(cls, v):
        if v not in SETTINGS:
            raise ValueError(f"unknown setting {v!r}; known: {', '.join(SETTINGS)}")
        return v

    @model_validator(mode="after")
    def _paths(self):
        if self.trace_path is not None and not self.trace_path.is_file():
            raise ValueError(f"trace file not found: {self.trace_path}")
        for key in self.sweep:
            resolve_key(key)
        return self


# short sweep names
SWEEP_ALIASES = {
    "n_adapters": "workload.n_adapters",
    "alpha": "workload.alpha",
    "rate": "workload.total_rate",
    "total_rate": "workload.total_rate",
    "cv": "workload.cv",
    "duration": "workload.duration",
    "policy": "scheduler.policy",
    "cluster_limit": "scheduler.cluster_limit",
    "max_batch_size": "scheduler.max_batch_size",
}


def resolve_key(key: str) -> List[str]:
    path = SWEEP_ALIASES.get(key, key).split(".")
    fields = ExperimentConfig.model_fields
    if path[0] not in fields:
        raise ValueError(f"unknown config key {key!r}")
    if len(path) == 2:
        section = fields[path[0]].annotation
        if not (isinstance(section, type) and issubclass(section, BaseModel)) or path[1] not in section.model_fields:
            raise ValueError(f"unknown config key {key!r}")
    elif len(path) > 2:
        raise ValueError(f"unknown config key {key!r}")
    return path


def with_value(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with one (possibly dotted) field replaced, re-validated."""
    data = cfg.model_dump(mode="json")
    path = resolve_key(key)
    target = data
    for p in path[:-1]:
        target = target[p]
    target[path[-1]] = value
    return ExperimentConfig.model_validate(data)


def load_config(path: Optional[Path]) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: top level must be a mapping")
        # relative trace paths are relative to the config file
        tp = data.get("trace_path")
        if tp and not Path(tp).is_absolute():
            data["trace_path"] = str(Path(path).parent / tp)
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        data["output_dir"] = env_dir
    return ExperimentConfig.model_validate(data)


def parse_scalar(text: str):
    """YAML scalar parsing for ``key=value`` flags (ints, floats, null, strings)."""
    return yaml.safe_load(text)
