"""SLO attainment, goodput / minimum-SLO-scale searches, and blocking stats.

Goodput is the maximum sustainable request rate at a target attainment
(default 90%). Both searches bisect assuming monotone attainment, verify
their bracket endpoints, and fall back to a geometric grid scan if the
sampled curve turns out non-monotone.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .cost_model import CostParams
from .engine import RequestOutcome, RunResult, run
from .files import atomic_write_text
from .scheduler import PolicyConfig
from .workload import Trace, scale_rate, scale_slo


class InfeasibleSearchError(ValueError):
    """The search target cannot be met anywhere in the given bounds."""


@dataclass(frozen=True)
class RunConfig:
    """Bundle of everything one simulation needs besides the trace."""

    policy: PolicyConfig
    cost: CostParams
    seed: int = 0


@dataclass(frozen=True)
class SearchResult:
    value: float
    saturated: bool
    samples: tuple[tuple[float, float], ...]
    method: str  # "bisection" | "grid"

    @property
    def num_runs(self) -> int:
        return len(self.samples)


def slo_attainment(
    outcomes: Sequence[RequestOutcome], class_filter: Optional[str] = None
) -> float:
    """Fraction of (optionally class-filtered) requests meeting their SLO."""
    if class_filter is None:
        selected = outcomes
    else:
        selected = [o for o in outcomes if o.task == class_filter]
    if not selected:
        raise ValueError(f"no outcomes selected (filter={class_filter!r})")
    return sum(1 for o in selected if o.met) / len(selected)


def blocking_stats(blocking_log: Sequence) -> dict:
    """Summary of signal-to-ACK intervals; moments absent on an empty log."""
    intervals = sorted(entry[1] - entry[0] for entry in blocking_log)
    n = len(intervals)
    if n == 0:
        return {"count": 0, "mean_s": None, "p99_s": None, "max_s": None}
    rank = max(math.ceil(0.99 * n), 1)  # nearest-rank percentile
    return {
        "count": n,
        "mean_s": math.fsum(intervals) / n,
        "p99_s": intervals[rank - 1],
        "max_s": intervals[-1],
    }


def _non_monotone(values: Sequence[float], direction: int, slack: float = 0.03) -> bool:
    """direction=-1 expects non-increasing, +1 non-decreasing."""
    for a, b in zip(values, values[1:]):
        if direction < 0 and b > a + slack:
            return True
        if direction > 0 and b < a - slack:
            return True
    return False


def goodput_search(
    base_trace: Trace,
    run_config: RunConfig,
    target: float = 0.9,
    rate_bounds: tuple[float, float] = (0.25, 16.0),
    tol: float = 0.05,
) -> SearchResult:
    """Largest request rate (req/s) sustaining attainment >= target.

    Bisects over the rate, rescaling the base trace for each probe; raises
    InfeasibleSearchError if even the lower bound misses the target and
    returns the upper bound flagged ``saturated`` if it still meets it.
    """
    lo, hi = rate_bounds
    if not (0 < lo < hi):
        raise ValueError("rate_bounds must satisfy 0 < lo < hi")
    if not (0 < target <= 1):
        raise ValueError("target must be in (0, 1]")
    base_rate = base_trace.base_rate()
    cache: dict[float, float] = {}

    def attainment_at(rate: float) -> float:
        if rate not in cache:
            tr = scale_rate(base_trace, rate / base_rate)
            res = run(tr, run_config.policy, run_config.cost, run_config.seed)
            cache[rate] = slo_attainment(res.outcomes)
        return cache[rate]

    if attainment_at(lo) < target:
        raise InfeasibleSearchError(
            f"infeasible floor: attainment {cache[lo]:.4f} < {target} at rate {lo}"
        )
    if attainment_at(hi) >= target:
        return SearchResult(hi, True, tuple(sorted(cache.items())), "bisection")

    lo0, hi0 = lo, hi
    while hi - lo > tol * lo:
        mid = (lo + hi) / 2.0
        if attainment_at(mid) >= target:
            lo = mid
        else:
            hi = mid

    samples = sorted(cache.items())
    if _non_monotone([a for _, a in samples], direction=-1):
        best = lo0
        rate = lo0
        while rate <= hi0 * (1 + 1e-12):
            if attainment_at(rate) >= target:
                best = rate
            rate *= 1.0 + tol
        return SearchResult(best, False, tuple(sorted(cache.items())), "grid")
    return SearchResult(lo, False, tuple(samples), "bisection")


def min_slo_scale_search(
    base_trace: Trace,
    run_config: RunConfig,
    target: float = 0.9,
    scale_bounds: tuple[float, float] = (0.05, 8.0),
    tol: float = 0.05,
) -> SearchResult:
    """Smallest SLO scale factor reaching attainment >= target."""
    lo, hi = scale_bounds
    if not (0 < lo < hi):
        raise ValueError("scale_bounds must satisfy 0 < lo < hi")
    if not (0 < target <= 1):
        raise ValueError(f"unreachable attainment target {target}")
    cache: dict[float, float] = {}

    def attainment_at(scale: float) -> float:
        if scale not in cache:
            tr = scale_slo(base_trace, scale)
            res = run(tr, run_config.policy, run_config.cost, run_config.seed)
            cache[scale] = slo_attainment(res.outcomes)
        return cache[scale]

    if attainment_at(hi) < target:
        raise InfeasibleSearchError(
            f"unreachable: attainment {cache[hi]:.4f} < {target} at scale {hi}"
        )
    if attainment_at(lo) >= target:
        return SearchResult(lo, True, tuple(sorted(cache.items())), "bisection")

    lo0, hi0 = lo, hi
    while hi - lo > tol * hi:
        mid = (lo + hi) / 2.0
        if attainment_at(mid) >= target:
            hi = mid
        else:
            lo = mid

    samples = sorted(cache.items())
    if _non_monotone([a for _, a in samples], direction=+1):
        scale = lo0
        best = hi0
        while scale <= hi0 * (1 + 1e-12):
            if attainment_at(scale) >= target:
                best = scale
                break
            scale *= 1.0 + tol
        return SearchResult(best, False, tuple(sorted(cache.items())), "grid")
    return SearchResult(hi, False, tuple(samples), "bisection")


# ---------------------------------------------------------------------------
# Artifact formats

SWEEP_COLUMNS = [
    "sweep_var",
    "value",
    "attainment",
    "attainment_text",
    "attainment_image",
    "attainment_search",
    "attainment_file",
    "rounds",
    "preemptions",
    "mean_block_s",
    "max_block_s",
]

RUN_COLUMNS = ["id", "task", "arrival_s", "tokens", "slo_s", "ttft_s", "met"]


def attainment_by_class(outcomes: Sequence[RequestOutcome]) -> dict[str, float]:
    classes = sorted({o.task for o in outcomes})
    return {c: slo_attainment(outcomes, c) for c in classes}


def sweep_row(sweep_var: str, value: float, result: RunResult) -> dict:
    """One sweep-CSV row for a finished run."""
    by_class = attainment_by_class(result.outcomes)
    stats = blocking_stats(result.blocking_log)
    row = {
        "sweep_var": sweep_var,
        "value": value,
        "attainment": slo_attainment(result.outcomes),
        "rounds": result.rounds,
        "preemptions": result.commands.get("preempt", 0),
        "mean_block_s": "" if stats["count"] == 0 else stats["mean_s"],
        "max_block_s": "" if stats["count"] == 0 else stats["max_s"],
    }
    for cls in ("text", "image", "search", "file"):
        row[f"attainment_{cls}"] = by_class.get(cls, "")
    return row


def write_sweep_csv(rows: Sequence[dict], path: str) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def write_run_csv(result: RunResult, path: str) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(RUN_COLUMNS)
    for o in sorted(result.outcomes, key=lambda o: o.id):
        writer.writerow(
            [o.id, o.task, o.arrival_s, o.tokens, o.slo_s, o.ttft_s, int(o.met)]
        )
    atomic_write_text(path, buf.getvalue())


def summary_dict(result: RunResult) -> dict:
    """JSON-ready run summary (attainment, rounds, commands, blocking)."""
    return {
        "requests": result.num_requests,
        "attainment": slo_attainment(result.outcomes),
        "attainment_by_class": attainment_by_class(result.outcomes),
        "rounds": result.rounds,
        "commands": dict(result.commands),
        "blocking": blocking_stats(result.blocking_log),
        "policy": result.policy,
        "granularity": result.granularity,
        "seed": result.seed,
    }
