"""Experiment runner CLI: single runs, sweeps/searches, predictor
calibration, and trace generation.

Configuration is a JSON tree with one-to-one CLI flag overrides; every
artifact embeds the resolved-config hash and seed. Sweep points are
independent simulations and run in parallel by default (results are written
in sweep order, so parallelism never changes artifacts).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

from .cost_model import (
    CostParams,
    DEFAULT_COST_PARAMS,
    fit_quality,
    fit_ttft_poly,
)
from .engine import PreemptionGranularity, run
from .files import atomic_write_text
from .metrics import (
    RunConfig,
    goodput_search,
    min_slo_scale_search,
    summary_dict,
    sweep_row,
    write_run_csv,
    write_sweep_csv,
)
from .scheduler import PolicyConfig, PolicyKind
from .workload import (
    Trace,
    default_task_classes,
    generate_trace,
    load_trace,
    save_trace,
    scale_rate,
    scale_slo,
)

DEFAULT_CONFIG = {
    "trace": None,  # {"path": ...} or {"generator": {...}}
    "cost_model": None,
    "policy": "sedf",
    "granularity": "operator",
    "chunk_tokens": None,
    "batch_budget_tokens": 4096,
    "predictor_degree": 2,
    "rate_scale": 1.0,
    "slo_scale": 1.0,
    "seed": 0,
    "out_dir": "out",
    "event_log": False,
    "jobs": None,
    "sweep": None,
}


class ConfigError(ValueError):
    pass


def _write_json(path: str, obj: dict) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


# Keys that steer presentation/execution but never the simulation results.
_NON_SEMANTIC_KEYS = ("out_dir", "jobs", "event_log")


def config_hash(cfg: dict) -> str:
    semantic = {k: v for k, v in cfg.items() if k not in _NON_SEMANTIC_KEYS}
    canonical = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    if getattr(args, "trace", None):
        cfg["trace"] = {"path": args.trace}
    for flag, key in [
        ("policy", "policy"),
        ("granularity", "granularity"),
        ("chunk_tokens", "chunk_tokens"),
        ("batch_budget", "batch_budget_tokens"),
        ("rate_scale", "rate_scale"),
        ("slo_scale", "slo_scale"),
        ("seed", "seed"),
        ("out", "out_dir"),
        ("cost_model", "cost_model"),
        ("jobs", "jobs"),
    ]:
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "event_log", False):
        cfg["event_log"] = True
    return cfg


def build_trace(cfg: dict) -> Trace:
    spec = cfg["trace"]
    if not spec or ("path" not in spec) == ("generator" not in spec):
        raise ConfigError("config needs exactly one trace source: 'path' or 'generator'")
    if "path" in spec:
        trace = load_trace(spec["path"])
    else:
        gen = spec["generator"]
        classes = default_task_classes(gen.get("model", "llama3-8b"))
        trace = generate_trace(
            classes, float(gen["rate"]), float(gen["duration"]), int(gen["seed"])
        )
    if cfg["rate_scale"] != 1.0:
        trace = scale_rate(trace, float(cfg["rate_scale"]))
    if cfg["slo_scale"] != 1.0:
        trace = scale_slo(trace, float(cfg["slo_scale"]))
    return trace


def build_cost_params(cfg: dict) -> CostParams:
    if cfg["cost_model"]:
        return CostParams.from_file(cfg["cost_model"])
    return DEFAULT_COST_PARAMS


def build_policy(cfg: dict) -> PolicyConfig:
    return PolicyConfig(
        policy=PolicyKind(cfg["policy"]),
        granularity=PreemptionGranularity(cfg["granularity"]),
        chunk_tokens=None if cfg["chunk_tokens"] in (None, 0) else int(cfg["chunk_tokens"]),
        batch_budget_tokens=int(cfg["batch_budget_tokens"]),
        predictor_degree=int(cfg["predictor_degree"]),
    )


def cmd_run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    trace = build_trace(cfg)
    params = build_cost_params(cfg)
    policy = build_policy(cfg)
    result = run(trace, policy, params, seed=int(cfg["seed"]), record_events=cfg["event_log"])

    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    write_run_csv(result, os.path.join(out, "run.csv"))
    summary = summary_dict(result)
    summary["config_hash"] = config_hash(cfg)
    _write_json(os.path.join(out, "summary.json"), summary)
    if cfg["event_log"]:
        result.write_event_log(os.path.join(out, "events.jsonl"))
    return 0


def _sweep_point(payload: tuple[dict, float]) -> dict:
    cfg, value = payload
    var = cfg["sweep"]["variable"]
    point_cfg = dict(cfg)
    trace = build_trace(point_cfg)
    if var == "rate":
        trace = scale_rate(trace, float(value) / trace.base_rate())
    elif var == "slo_scale":
        trace = scale_slo(trace, float(value))
    elif var == "chunk_tokens":
        point_cfg["chunk_tokens"] = int(value)
    elif var == "batch_budget":
        point_cfg["batch_budget_tokens"] = int(value)
    else:
        raise ConfigError(f"unknown sweep variable {var!r}")
    params = build_cost_params(point_cfg)
    policy = build_policy(point_cfg)
    result = run(trace, policy, params, seed=int(point_cfg["seed"]))
    return sweep_row(var, value, result)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    sweep = cfg.get("sweep")
    if not sweep or "variable" not in sweep:
        raise ConfigError("sweep config requires a 'variable'")
    var = sweep["variable"]
    out = cfg["out_dir"]

    if "bounds" in sweep:
        trace = build_trace(cfg)
        rc = RunConfig(policy=build_policy(cfg), cost=build_cost_params(cfg), seed=int(cfg["seed"]))
        target = float(sweep.get("target", 0.9))
        tol = float(sweep.get("tol", 0.05))
        lo, hi = (float(b) for b in sweep["bounds"])
        if var == "rate":
            res = goodput_search(trace, rc, target=target, rate_bounds=(lo, hi), tol=tol)
        elif var == "slo_scale":
            res = min_slo_scale_search(trace, rc, target=target, scale_bounds=(lo, hi), tol=tol)
        else:
            raise ConfigError(f"bisection supports rate/slo_scale, not {var!r}")
        os.makedirs(out, exist_ok=True)
        _write_json(
            os.path.join(out, "search.json"),
            {
                "variable": var,
                "target": target,
                "tol": tol,
                "bounds": [lo, hi],
                "value": res.value,
                "saturated": res.saturated,
                "method": res.method,
                "samples": [list(s) for s in res.samples],
                "config_hash": config_hash(cfg),
                "seed": cfg["seed"],
            },
        )
        return 0

    values = sweep.get("values")
    if not values:
        raise ConfigError("sweep config requires non-empty 'values' or 'bounds'")
    if any(not math.isfinite(float(v)) or float(v) <= 0 for v in values):
        raise ConfigError("sweep values must be finite and positive")
    payloads = [(cfg, float(v)) for v in values]
    jobs = cfg["jobs"] or min(len(values), os.cpu_count() or 1)
    if jobs > 1 and len(values) > 1:
        with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]
    os.makedirs(out, exist_ok=True)
    write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
    _write_json(
        os.path.join(out, "sweep_meta.json"),
        {"variable": var, "values": [float(v) for v in values],
         "config_hash": config_hash(cfg), "seed": cfg["seed"]},
    )
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    samples = []
    with open(args.profile, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"tokens", "seconds"}:
            raise ConfigError(
                f"profile CSV must have header tokens,seconds (got {reader.fieldnames})"
            )
        for row in reader:
            samples.append((float(row["tokens"]), float(row["seconds"])))
    poly = fit_ttft_poly(samples, args.degree)
    quality = fit_quality(samples, poly)
    obj = poly.to_json_dict()
    obj.update(quality)
    _write_json(args.out, obj)
    print(f"degree={poly.degree} r2={quality['r2']:.6f} max_residual={quality['max_residual_s']:.3e}")
    return 0


def cmd_gen_trace(args: argparse.Namespace) -> int:
    classes = default_task_classes(args.model)
    trace = generate_trace(classes, args.rate, args.duration, args.seed)
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} requests to {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prefillsim",
        description="Discrete-event simulator for SLO-aware prefill scheduling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--trace", help="trace JSONL path (overrides config)")
        p.add_argument("--policy", choices=[k.value for k in PolicyKind])
        p.add_argument("--granularity", choices=[g.value for g in PreemptionGranularity])
        p.add_argument("--chunk-tokens", dest="chunk_tokens", type=int)
        p.add_argument("--batch-budget", dest="batch_budget", type=int)
        p.add_argument("--rate-scale", dest="rate_scale", type=float)
        p.add_argument("--slo-scale", dest="slo_scale", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--cost-model", dest="cost_model", help="CostParams JSON path")
        p.add_argument("--jobs", type=int)

    p_run = sub.add_parser("run", help="one simulation; writes run.csv + summary.json")
    add_common(p_run)
    p_run.add_argument("--event-log", dest="event_log", action="store_true",
                       help="also write events.jsonl")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="one run per sweep value, or a bisection search")
    add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep, event_log=False)

    p_cal = sub.add_parser("calibrate", help="fit the TTFT polynomial to a profile CSV")
    p_cal.add_argument("profile", help="CSV with header tokens,seconds")
    p_cal.add_argument("--degree", type=int, default=2)
    p_cal.add_argument("--out", default="predictor.json")
    p_cal.set_defaults(func=cmd_calibrate)

    p_gen = sub.add_parser("gen-trace", help="generate a synthetic trace JSONL")
    p_gen.add_argument("--rate", type=float, required=True)
    p_gen.add_argument("--duration", type=float, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--model", default="llama3-8b", help="SLO preset")
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_trace)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
