"""Request/trace data model, trace IO, and synthetic workload generation.

A trace is a time-ordered list of prefill requests, each carrying a token
count, a task-class label, and a TTFT SLO. Traces either come from a JSONL
file (one request per line) or from the synthetic generator, which draws
Poisson arrivals and heavy-tailed (lognormal) prompt lengths per task class.

Times are seconds relative to the trace origin (t = 0 at or just before the
first arrival), which keeps every deadline strictly positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np


class TraceFormatError(ValueError):
    """Raised when a trace file does not parse against the JSONL schema."""


@dataclass(frozen=True)
class TaskClass:
    """One workload class: prompt-length distribution, mix share, and SLO.

    Lengths are tokens; ``ttft_slo`` is seconds. ``mix_ratio`` is the
    fraction of arrivals drawn from this class.
    """

    name: str
    mean_len: float
    std_len: float
    p99_len: float
    mix_ratio: float
    ttft_slo: float

    def __post_init__(self) -> None:
        if self.mean_len <= 0:
            raise ValueError(f"{self.name}: mean_len must be > 0")
        if self.std_len < 0:
            raise ValueError(f"{self.name}: std_len must be >= 0")
        if self.p99_len < self.mean_len:
            raise ValueError(f"{self.name}: p99_len must be >= mean_len")
        if self.ttft_slo <= 0:
            raise ValueError(f"{self.name}: ttft_slo must be > 0")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError(f"{self.name}: mix_ratio must be in [0, 1]")

    def lognormal_params(self) -> tuple[float, float]:
        """(mu, sigma) of the lognormal matching (mean_len, std_len)."""
        if self.std_len == 0:
            return math.log(self.mean_len), 0.0
        sigma2 = math.log(1.0 + (self.std_len / self.mean_len) ** 2)
        mu = math.log(self.mean_len) - sigma2 / 2.0
        return mu, math.sqrt(sigma2)


# Prompt-length distributions and arrival mix of the four production task
# classes used throughout the experiments (tokens).
CLASS_TABLE = {
    "text": (590.0, 652.0, 3040.0, 0.68),
    "image": (532.0, 510.0, 2764.0, 0.08),
    "search": (5976.0, 3456.0, 16635.0, 0.20),
    "file": (6833.0, 5186.0, 22390.0, 0.04),
}

# Per-model TTFT SLO presets (seconds) for the four classes.
SLO_PRESETS = {
    "llama3-8b": {"text": 0.25, "image": 0.5, "search": 4.0, "file": 6.0},
    "qwen2.5-14b": {"text": 0.4, "image": 0.8, "search": 6.5, "file": 9.0},
    "llama3-70b": {"text": 1.0, "image": 2.0, "search": 15.0, "file": 18.0},
}


def default_task_classes(model: str = "llama3-8b") -> list[TaskClass]:
    """The standard heterogeneous four-class mix with the model's SLOs."""
    try:
        slos = SLO_PRESETS[model]
    except KeyError:
        raise ValueError(f"unknown model preset {model!r}; have {sorted(SLO_PRESETS)}")
    return [
        TaskClass(name, mean, std, p99, ratio, slos[name])
        for name, (mean, std, p99, ratio) in CLASS_TABLE.items()
    ]


def validate_classes(classes: Sequence[TaskClass]) -> None:
    if not classes:
        raise ValueError("class set must be non-empty")
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise ValueError("class names must be unique")
    total = sum(c.mix_ratio for c in classes)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"mix_ratios must sum to 1 (got {total})")


@dataclass(frozen=True)
class Request:
    """A single prefill job."""

    id: int
    task: str
    arrival_time: float
    num_tokens: int
    ttft_slo: float

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise ValueError(f"request {self.id}: arrival_time must be >= 0")
        if self.num_tokens < 1:
            raise ValueError(f"request {self.id}: num_tokens must be >= 1")
        if self.ttft_slo <= 0:
            raise ValueError(f"request {self.id}: ttft_slo must be > 0")

    @property
    def deadline(self) -> float:
        """Arrival time plus the TTFT SLO."""
        return self.arrival_time + self.ttft_slo


@dataclass(frozen=True)
class Trace:
    """Requests sorted by arrival time, with unique ids."""

    requests: tuple[Request, ...]
    origin: str = ""

    def __post_init__(self) -> None:
        ids = set()
        prev = -math.inf
        for r in self.requests:
            if r.arrival_time < prev:
                raise ValueError("requests must be sorted by arrival_time")
            prev = r.arrival_time
            if r.id in ids:
                raise ValueError(f"duplicate request id {r.id}")
            ids.add(r.id)

    def __len__(self) -> int:
        return len(self.requests)

    def base_rate(self) -> float:
        """Empirical arrival rate (requests/second) over the trace span."""
        if len(self.requests) < 2:
            raise ValueError("need >= 2 requests to infer a rate")
        span = self.requests[-1].arrival_time - self.requests[0].arrival_time
        if span <= 0:
            raise ValueError("trace span is zero; rate undefined")
        return (len(self.requests) - 1) / span


def _sorted_trace(requests: Iterable[Request], origin: str) -> Trace:
    ordered = tuple(sorted(requests, key=lambda r: (r.arrival_time, r.id)))
    return Trace(ordered, origin)


def generate_trace(
    classes: Sequence[TaskClass], rate: float, duration: float, seed: int
) -> Trace:
    """Synthesize a trace: Poisson arrivals, per-class lognormal lengths.

    Arrivals follow a Poisson process at ``rate`` over [0, duration); each
    request's class is sampled by mix ratio and its token count drawn from a
    lognormal matched to the class (mean, std), clipped to
    [1, 1.5 * p99_len]. Deterministic given ``seed``.
    """
    if rate <= 0:
        raise ValueError("rate must be > 0")
    if duration <= 0:
        raise ValueError("duration must be > 0")
    validate_classes(classes)

    rng = np.random.default_rng(seed)
    cum = np.cumsum([c.mix_ratio for c in classes])
    cum[-1] = 1.0  # guard against fp undershoot
    params = [c.lognormal_params() for c in classes]

    requests = []
    t = 0.0
    i = 0
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= duration:
            break
        ci = int(np.searchsorted(cum, rng.random(), side="right"))
        cls = classes[ci]
        mu, sigma = params[ci]
        raw = rng.lognormal(mu, sigma) if sigma > 0 else math.exp(mu)
        tokens = int(round(min(max(raw, 1.0), 1.5 * cls.p99_len)))
        tokens = max(tokens, 1)
        requests.append(Request(i, cls.name, t, tokens, cls.ttft_slo))
        i += 1
    return Trace(tuple(requests), origin=f"synthetic rate={rate} duration={duration} seed={seed}")


def scale_rate(trace: Trace, factor: float) -> Trace:
    """Compress inter-arrivals by ``factor`` (rate multiplies by factor)."""
    if factor <= 0:
        raise ValueError("factor must be > 0")
    reqs = (replace(r, arrival_time=r.arrival_time / factor) for r in trace.requests)
    return _sorted_trace(reqs, trace.origin)


def scale_slo(trace: Trace, factor: float) -> Trace:
    """Multiply every TTFT SLO by ``factor``; arrivals unchanged."""
    if factor <= 0:
        raise ValueError("factor must be > 0")
    reqs = (replace(r, ttft_slo=r.ttft_slo * factor) for r in trace.requests)
    return _sorted_trace(reqs, trace.origin)


_REQUIRED_KEYS = ("id", "task", "arrival_s", "num_tokens", "ttft_slo_s")


def load_trace(path: str) -> Trace:
    """Read a JSONL trace file; unknown keys are ignored.

    Raises TraceFormatError naming the offending line on parse failures,
    missing/invalid fields, or duplicate ids.
    """
    requests = []
    seen_ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise TraceFormatError(f"{path}: line {lineno}: expected an object")
            for key in _REQUIRED_KEYS:
                if key not in obj:
                    raise TraceFormatError(f"{path}: line {lineno}: missing key {key!r}")
            rid = obj["id"]
            if not isinstance(rid, int):
                raise TraceFormatError(f"{path}: line {lineno}: id must be an integer")
            if rid in seen_ids:
                raise TraceFormatError(f"{path}: line {lineno}: duplicate id {rid}")
            seen_ids.add(rid)
            try:
                req = Request(
                    id=rid,
                    task=str(obj["task"]),
                    arrival_time=float(obj["arrival_s"]),
                    num_tokens=int(obj["num_tokens"]),
                    ttft_slo=float(obj["ttft_slo_s"]),
                )
            except ValueError as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
            requests.append(req)
    return _sorted_trace(requests, origin=path)


def save_trace(trace: Trace, path: str) -> None:
    """Write the JSONL schema, sorted by arrival_s (round-trips load_trace)."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace.requests:
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "task": r.task,
                        "arrival_s": r.arrival_time,
                        "num_tokens": r.num_tokens,
                        "ttft_slo_s": r.ttft_slo,
                    }
                )
            )
            fh.write("\n")
