"""Command-line driver: ``loraserve {generate,simulate,tp,verify}``.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import pydantic

from . import metrics
from .config import (
    OUTPUT_DIR_ENV,
    ExperimentConfig,
    load_config,
    parse_scalar,
    resolve_key,
    with_value,
)
from .engine import simulate
from .settings import get_setting
from .tp import cost_table
from .verify import run_all
from .workload import WORKLOAD_PRESETS, SyntheticConfig, Trace, TraceError, gen_synthetic

logger = logging.getLogger("loraserve")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _range(text: str):
    parts = _ints(text)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return tuple(parts)


# generate

def cmd_generate(args) -> int:
    base = WORKLOAD_PRESETS[args.preset] if args.preset else SyntheticConfig()
    fields = asdict(base)
    for key in ("n_adapters", "alpha", "total_rate", "cv", "duration", "seed", "input_range", "output_range"):
        v = getattr(args, key)
        if v is not None:
            fields[key] = v
    cfg = SyntheticConfig(**fields)
    ranks = get_setting(args.setting).ranks
    trace = gen_synthetic(cfg, ranks)
    trace.metadata["setting"] = args.setting
    if args.output == "-":
        sys.stdout.write(trace.dumps())
    else:
        out = Path(args.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        trace.save(out)
        print(f"wrote {len(trace)} requests to {out}", file=sys.stderr)
    return EXIT_OK


# simulate

def _parse_sweep(items: Sequence[str]) -> dict:
    sweep = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--sweep expects KEY=V1,V2,..., got {item!r}")
        key, values = item.split("=", 1)
        resolve_key(key)
        sweep[key] = [parse_scalar(v) for v in values.split(",") if v != ""]
        if not sweep[key]:
            raise UsageError(f"--sweep {key}: no values")
    return sweep


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = with_value(cfg, key, parse_scalar(value))
    direct = {
        "setting": args.setting, "mode": args.mode, "pool_pages": args.pool_pages,
        "seed": args.seed, "trace_path": args.trace, "label": args.label,
        "scheduler.policy": args.policy, "scheduler.cluster_limit": args.cluster_limit,
        "workload.preset": args.preset, "workload.n_adapters": args.n_adapters,
        "workload.alpha": args.alpha, "workload.total_rate": args.rate,
        "workload.cv": args.cv, "workload.duration": args.duration,
    }
    for key, value in direct.items():
        if value is not None:
            cfg = with_value(cfg, key, str(value) if isinstance(value, Path) else value)
    if args.output_dir is not None:
        cfg = with_value(cfg, "output_dir", str(args.output_dir))
    if args.sweep:
        cfg = cfg.model_copy(update={"sweep": {**cfg.sweep, **_parse_sweep(args.sweep)}})
    return cfg


def _points(cfg: ExperimentConfig):
    """Expand the sweep grid into (label, overrides, config) triples."""
    if not cfg.sweep:
        return [(cfg.label, {}, cfg)]
    keys = list(cfg.sweep)
    out = []
    for combo in itertools.product(*(cfg.sweep[k] for k in keys)):
        point = cfg
        for k, v in zip(keys, combo):
            point = with_value(point, k, v)
        overrides = dict(zip(keys, combo))
        label = cfg.label + "-" + "-".join(f"{k}={v}" for k, v in overrides.items())
        out.append((label, overrides, point))
    return out


def run_point(cfg: ExperimentConfig):
    """Simulate one configuration; returns ``(events, report, extra)``."""
    setting = get_setting(cfg.setting)
    if cfg.trace_path is not None:
        trace = Trace.load(cfg.trace_path)
        trace.validate()
    else:
        trace = gen_synthetic(cfg.workload.build(cfg.seed), setting.ranks)
    engine = simulate(trace, setting.ranks, pool_pages=cfg.pool_pages,
                      config=cfg.scheduler.build(), latency=cfg.latency.build(),
                      mode=cfg.mode, switch_threshold=cfg.switch_threshold)
    report = metrics.compute(engine.events, slo_seconds=cfg.scheduler.slo_first_token)
    extra = {"iterations": engine.iterations, "adapter_loads": engine.adapter_loads,
             "switches": engine.switches}
    return engine.events, report, extra


def _run_labeled(item):
    label, overrides, cfg = item
    events, report, extra = run_point(cfg)
    return label, overrides, events, report, extra


def cmd_simulate(args) -> int:
    cfg = _apply_flags(load_config(args.config), args)
    points = _points(cfg)
    if args.jobs and args.jobs > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_labeled, points))
    else:
        results = [_run_labeled(p) for p in points]

    out = cfg.output_dir
    (out / "events").mkdir(parents=True, exist_ok=True)
    sweep_cols = list(cfg.sweep)
    rows, jsonl = [], io.StringIO()
    for label, overrides, events, report, extra in results:
        with open(out / "events" / f"{_safe(label)}.jsonl", "w", encoding="utf-8") as fh:
            for ev in events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")
        rows.append({**{k: overrides[k] for k in sweep_cols}, **report.csv_row(label)})
        jsonl.write(json.dumps({"label": label, "overrides": overrides, **extra,
                                "metrics": report.to_dict()}, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics.write_csv(rows, sweep_cols), encoding="utf-8")
    (out / "metrics.jsonl").write_text(jsonl.getvalue(), encoding="utf-8")
    (out / "config.json").write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for row in rows:
        print(f"{row['label']}: throughput={row['throughput']:.4f} req/s "
              f"slo_attainment={row['slo_attainment']:.3f} aborted={row['num_aborted']}")
    print(f"results in {out}", file=sys.stderr)
    return EXIT_OK


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_=." else "_" for c in label)


# tp

def cmd_tp(args) -> int:
    rows = cost_table(args.h, args.r, args.n, tokens=args.tokens, layer=args.layer)
    if args.format == "json":
        for row in rows:
            print(json.dumps(row, sort_keys=True))
        return EXIT_OK
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows({k: ("" if v is None else v) for k, v in row.items()} for row in rows)
    return EXIT_OK


# verify

def cmd_verify(args) -> int:
    results = run_all(args.check or None)
    if not results:
        raise UsageError(f"no check named {args.check}")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<36} {r.seconds:6.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loraserve", description="Multi-adapter LoRA serving simulator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic request trace")
    g.add_argument("--preset", choices=sorted(WORKLOAD_PRESETS))
    g.add_argument("--setting", default="S2", help="model setting providing the rank list")
    g.add_argument("--n-adapters", dest="n_adapters", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--rate", dest="total_rate", type=float)
    g.add_argument("--cv", type=float)
    g.add_argument("--duration", type=float)
    g.add_argument("--input-range", dest="input_range", type=_range, metavar="LO,HI")
    g.add_argument("--output-range", dest="output_range", type=_range, metavar="LO,HI")
    g.add_argument("--seed", type=int)
    g.add_argument("-o", "--output", default="-", help="trace path, '-' for stdout")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", help="run a simulation or a sweep")
    s.add_argument("config", nargs="?", type=Path, help="YAML experiment config")
    s.add_argument("--setting")
    s.add_argument("--mode", choices=["factored", "merged"])
    s.add_argument("--policy", choices=["fcfs", "lcfs", "early_abort"])
    s.add_argument("--cluster-limit", dest="cluster_limit", type=int)
    s.add_argument("--pool-pages", dest="pool_pages", type=int)
    s.add_argument("--trace", type=Path)
    s.add_argument("--preset", choices=sorted(WORKLOAD_PRESETS))
    s.add_argument("--n-adapters", dest="n_adapters", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--rate", type=float)
    s.add_argument("--cv", type=float)
    s.add_argument("--duration", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--label")
    s.add_argument("--output-dir", dest="output_dir", type=Path,
                   help=f"overrides the config and ${OUTPUT_DIR_ENV}")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    s.add_argument("--sweep", action="append", metavar="KEY=V1,V2", help="sweep a field; repeat for a grid")
    s.add_argument("--jobs", type=int, default=1, help="parallel sweep points")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("tp", help="tensor-parallel communication cost table")
    t.add_argument("--h", type=_ints, default=[4096])
    t.add_argument("--r", type=_ints, default=[8, 16, 32, 64])
    t.add_argument("--n", type=_ints, default=[1, 2, 4, 8])
    t.add_argument("--tokens", type=int, default=1)
    t.add_argument("--layer", choices=["attention", "mlp"], default="attention")
    t.add_argument("--format", choices=["csv", "json"], default="csv")
    t.set_defaults(func=cmd_tp)

    v = sub.add_parser("verify", help="run the built-in property checks")
    v.add_argument("--check", action="append", help="run only the named check")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pydantic.ValidationError, TraceError, UsageError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
