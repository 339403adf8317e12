"""Operator-level prefill cost model and the offline-fitted TTFT predictor.

A prefill job (a batch of one or more requests, optionally split into
token chunks) expands into an ordered timeline of per-operator durations:
chunk-outer, then layer, then the operator sequence of the configured
architecture. Durations come from a small analytic model: a fixed cost plus
a linear per-token cost per operator, plus a quadratic causal-attention term
that scales with new tokens times attended context. Per-chunk launch
overhead and per-boundary preemption-check overhead are modeled explicitly.

Default coefficients are synthetic but calibrated so that a 32K-token,
32-layer dense prefill totals ~3 s and the qualitative trends (chunk-size
trade-off, batching asymmetry, operator-vs-layer blocking ratio) match the
behavior observed on real hardware.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np


class OperatorKind(str, enum.Enum):
    QKV_PROJ = "qkv_proj"
    ATTN = "attn"
    O_PROJ = "o_proj"
    GATE_UP_PROJ = "gate_up_proj"
    DOWN_PROJ = "down_proj"
    GATE = "gate"
    EXPERTS = "experts"


DENSE_LAYER_OPS = (
    OperatorKind.QKV_PROJ,
    OperatorKind.ATTN,
    OperatorKind.O_PROJ,
    OperatorKind.GATE_UP_PROJ,
    OperatorKind.DOWN_PROJ,
)

MOE_LAYER_OPS = (
    OperatorKind.QKV_PROJ,
    OperatorKind.ATTN,
    OperatorKind.O_PROJ,
    OperatorKind.GATE,
    OperatorKind.EXPERTS,
)


def _default_c_lin() -> dict[OperatorKind, float]:
    # seconds per new token
    return {
        OperatorKind.QKV_PROJ: 2.87e-7,
        OperatorKind.ATTN: 9.00e-7,
        OperatorKind.O_PROJ: 2.30e-7,
        OperatorKind.GATE_UP_PROJ: 8.05e-7,
        OperatorKind.DOWN_PROJ: 4.02e-7,
        OperatorKind.GATE: 0.60e-7,
        OperatorKind.EXPERTS: 1.20e-6,
    }


def _default_c_fix() -> dict[OperatorKind, float]:
    # seconds per operator launch
    return {
        OperatorKind.QKV_PROJ: 4.5e-4,
        OperatorKind.ATTN: 6.0e-4,
        OperatorKind.O_PROJ: 4.5e-4,
        OperatorKind.GATE_UP_PROJ: 4.5e-4,
        OperatorKind.DOWN_PROJ: 4.5e-4,
        OperatorKind.GATE: 2.0e-4,
        OperatorKind.EXPERTS: 7.0e-4,
    }


@dataclass(frozen=True)
class CostParams:
    """Coefficients of the analytic prefill cost model.

    ``c_attn`` multiplies new_tokens x attended context (seconds/token^2);
    ``c_chunk`` is charged once per chunk; ``c_check`` once per operator
    boundary (the cooperative preemption check). Tensor parallelism divides
    raw operator durations by ``tp_degree`` and then inflates them by
    ``1 + tp_comm_overhead``.
    """

    num_layers: int = 32
    arch: str = "dense"
    c_lin: Mapping[OperatorKind, float] = field(default_factory=_default_c_lin)
    c_attn: float = 5.0e-12
    c_fix: Mapping[OperatorKind, float] = field(default_factory=_default_c_fix)
    c_chunk: float = 1.0e-3
    c_check: float = 1.0e-6
    tp_degree: int = 1
    tp_comm_overhead: float = 0.0

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.arch not in ("dense", "moe"):
            raise ValueError(f"arch must be 'dense' or 'moe', got {self.arch!r}")
        if self.tp_degree < 1:
            raise ValueError("tp_degree must be >= 1")
        if self.tp_comm_overhead < 0:
            raise ValueError("tp_comm_overhead must be >= 0")
        for name in ("c_attn", "c_chunk", "c_check"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for kind in self.layer_ops():
            if self.c_lin.get(kind, 0.0) < 0 or self.c_fix.get(kind, 0.0) < 0:
                raise ValueError(f"negative coefficient for {kind.value}")

    def layer_ops(self) -> tuple[OperatorKind, ...]:
        return DENSE_LAYER_OPS if self.arch == "dense" else MOE_LAYER_OPS

    def to_json_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "arch": self.arch,
            "c_lin": {k.value: v for k, v in self.c_lin.items()},
            "c_attn": self.c_attn,
            "c_fix": {k.value: v for k, v in self.c_fix.items()},
            "c_chunk": self.c_chunk,
            "c_check": self.c_check,
            "tp_degree": self.tp_degree,
            "tp_comm_overhead": self.tp_comm_overhead,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "CostParams":
        kwargs = dict(obj)
        for key in ("c_lin", "c_fix"):
            if key in kwargs:
                kwargs[key] = {OperatorKind(k): float(v) for k, v in kwargs[key].items()}
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "CostParams":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


DEFAULT_COST_PARAMS = CostParams()


def operator_duration(
    kind: OperatorKind, new_tokens: int, prefix_tokens: int, p: CostParams
) -> float:
    """Duration of one operator execution over a token segment.

    Attention pays the quadratic term new * (prefix + new); every other
    operator is fixed-plus-linear in the new tokens.
    """
    if new_tokens < 1:
        raise ValueError("new_tokens must be >= 1")
    if prefix_tokens < 0:
        raise ValueError("prefix_tokens must be >= 0")
    raw = p.c_fix.get(kind, 0.0) + p.c_lin.get(kind, 0.0) * new_tokens
    if kind is OperatorKind.ATTN:
        raw += p.c_attn * new_tokens * (prefix_tokens + new_tokens)
    return raw / p.tp_degree * (1.0 + p.tp_comm_overhead)


@dataclass(frozen=True)
class TimelineEntry:
    layer: int
    chunk: int
    kind: OperatorKind
    duration: float


@dataclass(frozen=True)
class OperatorTimeline:
    """Flattened (chunk -> layer -> operator) duration sequence."""

    entries: tuple[TimelineEntry, ...]
    total_duration: float

    def __len__(self) -> int:
        return len(self.entries)

    def max_entry_duration(self) -> float:
        return max(e.duration for e in self.entries)


def build_timeline(
    per_request_tokens: Sequence[int],
    chunk_size: Optional[int],
    p: CostParams,
) -> OperatorTimeline:
    """Expand a (batched, optionally chunked) prefill into its timeline.

    The batch's token stream is laid out request after request and cut into
    ceil(N / chunk_size) chunks (one chunk of N tokens if unchunked). Linear
    terms use the chunk's total new tokens; the attention quadratic term is
    summed per request over that request's share of the chunk against its
    own already-computed prefix, so requests never attend across the batch.
    Each chunk is charged ``c_chunk`` once, on its first entry.
    """
    if not per_request_tokens:
        raise ValueError("per_request_tokens must be non-empty")
    if any(t < 1 for t in per_request_tokens):
        raise ValueError("all token counts must be >= 1")
    if chunk_size is not None and chunk_size < 1:
        raise ValueError("chunk_size must be >= 1 when given")

    total = int(sum(per_request_tokens))
    starts = np.concatenate(([0], np.cumsum(per_request_tokens)))
    if chunk_size is None or chunk_size >= total:
        bounds = [(0, total)]
    else:
        bounds = [
            (lo, min(lo + chunk_size, total)) for lo in range(0, total, chunk_size)
        ]

    ops = p.layer_ops()
    scale = (1.0 + p.tp_comm_overhead) / p.tp_degree
    entries: list[TimelineEntry] = []
    for ci, (s, e) in enumerate(bounds):
        new_total = e - s
        quad_mass = 0.0
        for ri, n_r in enumerate(per_request_tokens):
            r0, r1 = int(starts[ri]), int(starts[ri + 1])
            share = min(e, r1) - max(s, r0)
            if share <= 0:
                continue
            prefix = min(max(s - r0, 0), n_r)
            quad_mass += share * (prefix + share)
        for layer in range(p.num_layers):
            for oi, kind in enumerate(ops):
                raw = p.c_fix.get(kind, 0.0) + p.c_lin.get(kind, 0.0) * new_total
                if kind is OperatorKind.ATTN:
                    raw += p.c_attn * quad_mass
                d = raw * scale
                if layer == 0 and oi == 0:
                    d += p.c_chunk
                entries.append(TimelineEntry(layer, ci, kind, d))
    total_duration = math.fsum(e.duration for e in entries)
    return OperatorTimeline(tuple(entries), total_duration)


@dataclass(frozen=True)
class TtftPoly:
    """Polynomial TTFT predictor: coefficients a_0..a_d over token count."""

    coefficients: tuple[float, ...]

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def __call__(self, n_tokens: float) -> float:
        acc = 0.0
        for c in reversed(self.coefficients):
            acc = acc * n_tokens + c
        return max(acc, 0.0)

    def to_json_dict(self) -> dict:
        return {"degree": self.degree, "coefficients": list(self.coefficients)}

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "TtftPoly":
        return cls(tuple(float(c) for c in obj["coefficients"]))


def fit_ttft_poly(samples: Sequence[tuple[float, float]], degree: int) -> TtftPoly:
    """Least-squares polynomial fit of latency over token count.

    Requires degree in {1, 2, 3} and at least degree + 1 samples with
    distinct token counts; rejects fits that decrease anywhere over the
    fitted token range.
    """
    if degree not in (1, 2, 3):
        raise ValueError("degree must be in {1, 2, 3}")
    if len(samples) < degree + 1:
        raise ValueError(f"need >= {degree + 1} samples for degree {degree}")
    x = np.asarray([s[0] for s in samples], dtype=float)
    y = np.asarray([s[1] for s in samples], dtype=float)
    if len(np.unique(x)) < degree + 1:
        raise ValueError("sample token counts are rank-deficient for this degree")

    # Column-scaled Vandermonde keeps the normal equations well conditioned
    # for token counts up to ~1e5.
    scales = np.array([max(np.max(np.abs(x)) ** k, 1.0) for k in range(degree + 1)])
    vand = np.vander(x, degree + 1, increasing=True) / scales
    coeffs_scaled, _, rank, _ = np.linalg.lstsq(vand, y, rcond=None)
    if rank < degree + 1:
        raise ValueError("sample token counts are rank-deficient for this degree")
    coeffs = tuple(float(c) for c in coeffs_scaled / scales)
    poly = TtftPoly(coeffs)

    grid = np.linspace(float(np.min(x)), float(np.max(x)), 256)
    vals = np.array([poly(g) for g in grid])
    if np.any(np.diff(vals) < -1e-9 * max(float(np.max(vals)), 1.0)):
        raise ValueError("fitted polynomial is decreasing over the sample range")
    return poly


def predict_latency(n_tokens: float, poly: TtftPoly) -> float:
    """Evaluate the predictor, clamped to >= 0."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    return poly(n_tokens)


def fit_quality(samples: Sequence[tuple[float, float]], poly: TtftPoly) -> dict:
    """R^2 and max absolute residual of ``poly`` against ``samples``."""
    y = np.asarray([s[1] for s in samples], dtype=float)
    pred = np.asarray([poly(s[0]) for s in samples])
    resid = y - pred
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return {"r2": r2, "max_residual_s": float(np.max(np.abs(resid)))}


def self_calibrated_poly(
    p: CostParams,
    degree: int = 2,
    chunk_size: Optional[int] = None,
    token_range: tuple[int, int] = (64, 65536),
    points: int = 17,
) -> TtftPoly:
    """Fit the predictor to this cost model's own single-request totals.

    Stands in for fitting against offline prefill profiles; uses a log-spaced
    token grid and the run's chunking configuration so predictions match the
    timelines the scheduler will actually see.
    """
    lo, hi = token_range
    grid = np.unique(
        np.round(np.geomspace(lo, hi, points)).astype(int)
    )
    samples = [
        (float(n), build_timeline([int(n)], chunk_size, p).total_duration)
        for n in grid
    ]
    return fit_ttft_poly(samples, degree)
