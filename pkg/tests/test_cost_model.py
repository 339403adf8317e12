import math
from collections import defaultdict

import numpy as np
import pytest

from prefillsim.cost_model import (
    CostParams,
    DEFAULT_COST_PARAMS,
    DENSE_LAYER_OPS,
    MOE_LAYER_OPS,
    OperatorKind,
    TtftPoly,
    build_timeline,
    fit_quality,
    fit_ttft_poly,
    operator_duration,
    predict_latency,
    self_calibrated_poly,
)

ZERO = CostParams(c_lin={}, c_attn=0.0, c_fix={}, c_chunk=0.0, c_check=0.0)
ATTN_ONLY = CostParams(c_lin={}, c_attn=1.0, c_fix={}, c_chunk=0.0, c_check=0.0)


def chunk_totals(timeline):
    by_chunk = defaultdict(float)
    for e in timeline.entries:
        by_chunk[e.chunk] += e.duration
    return by_chunk


class TestOperatorDuration:
    def test_zero_coefficients(self):
        for kind in OperatorKind:
            assert operator_duration(kind, 17, 5, ZERO) == 0.0

    def test_attn_quadratic(self):
        assert operator_duration(OperatorKind.ATTN, 4, 0, ATTN_ONLY) == 16.0
        assert operator_duration(OperatorKind.ATTN, 2, 2, ATTN_ONLY) == 8.0

    def test_chunking_redistributes_quadratic(self):
        # 4 tokens in one shot vs 2-then-2: 16 vs 4 + 8.
        whole = operator_duration(OperatorKind.ATTN, 4, 0, ATTN_ONLY)
        first = operator_duration(OperatorKind.ATTN, 2, 0, ATTN_ONLY)
        second = operator_duration(OperatorKind.ATTN, 2, 2, ATTN_ONLY)
        assert whole == 16.0
        assert first + second == 12.0 < whole

    def test_tp_scaling(self):
        p1 = CostParams(c_lin={OperatorKind.QKV_PROJ: 1.0}, c_attn=0, c_fix={})
        base = operator_duration(OperatorKind.QKV_PROJ, 10, 0, p1)
        p2 = CostParams(
            c_lin={OperatorKind.QKV_PROJ: 1.0}, c_attn=0, c_fix={},
            tp_degree=2, tp_comm_overhead=0.1,
        )
        scaled = operator_duration(OperatorKind.QKV_PROJ, 10, 0, p2)
        assert scaled == pytest.approx(base / 2 * 1.1)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            operator_duration(OperatorKind.ATTN, 0, 0, ZERO)
        with pytest.raises(ValueError):
            operator_duration(OperatorKind.ATTN, 1, -1, ZERO)


class TestBuildTimeline:
    def test_structural_count_dense(self):
        for layers in (1, 4, 32):
            p = CostParams(num_layers=layers)
            tl = build_timeline([1000], None, p)
            assert len(tl) == 5 * layers

    def test_moe_ops(self):
        p = CostParams(num_layers=2, arch="moe")
        tl = build_timeline([100], None, p)
        kinds = [e.kind for e in tl.entries[:5]]
        assert tuple(kinds) == MOE_LAYER_OPS
        assert p.layer_ops() == MOE_LAYER_OPS
        assert CostParams().layer_ops() == DENSE_LAYER_OPS

    def test_total_is_sum(self):
        tl = build_timeline([3000, 500], 1024, DEFAULT_COST_PARAMS)
        assert tl.total_duration == pytest.approx(
            math.fsum(e.duration for e in tl.entries), abs=1e-12
        )

    def test_batched_attn_no_cross_attention(self):
        # total attn quadratic mass per layer = c_attn*(a^2 + b^2) < c_attn*(a+b)^2
        a, b = 7, 5
        tl = build_timeline([a, b], None, ATTN_ONLY)
        attn = [e.duration for e in tl.entries if e.kind == OperatorKind.ATTN]
        assert attn[0] == pytest.approx(a * a + b * b)
        assert attn[0] < (a + b) ** 2

    def test_chunked_batched_attn_uses_per_request_prefixes(self):
        attn_1l = CostParams(num_layers=1, c_lin={}, c_attn=1.0, c_fix={},
                             c_chunk=0.0, c_check=0.0)
        # Two requests of 4 tokens, chunk size 4: chunk 1 covers request 0
        # entirely, chunk 2 covers request 1 with a zero per-request prefix.
        tl = build_timeline([4, 4], 4, attn_1l)
        attn = [e.duration for e in tl.entries if e.kind == OperatorKind.ATTN]
        assert attn == [16.0, 16.0]
        # Chunks misaligned with request boundaries: chunk 2 spans the tail
        # of request 0 (prefix 3) and head of request 1 (prefix 0).
        tl2 = build_timeline([4, 4], 3, attn_1l)
        attn2 = [e.duration for e in tl2.entries if e.kind == OperatorKind.ATTN]
        # chunk0: 3*(0+3)=9; chunk1: 1*(3+1) + 2*(0+2)=8; chunk2: 2*(2+2)=8
        assert attn2 == [9.0, 8.0, 8.0]

    def test_chunk_count_and_overhead(self):
        p = CostParams(num_layers=1, c_lin={}, c_attn=0.0, c_fix={}, c_chunk=0.5, c_check=0.0)
        tl = build_timeline([10], 4, p)
        assert max(e.chunk for e in tl.entries) == 2  # ceil(10/4) = 3 chunks
        assert tl.total_duration == pytest.approx(3 * 0.5)

    def test_chunk_sweep_tradeoff(self):
        # Fig-3-shaped trade-off on the default model: growing chunks lower
        # the total but raise the largest single-chunk latency.
        totals, maxes = [], []
        for c in (512, 1024, 2048, 4096, 8192):
            tl = build_timeline([32768], c, DEFAULT_COST_PARAMS)
            totals.append(tl.total_duration)
            maxes.append(max(chunk_totals(tl).values()))
        assert all(a > b for a, b in zip(totals, totals[1:]))
        assert all(a < b for a, b in zip(maxes, maxes[1:]))

    def test_chunked_never_cheaper_than_unchunked(self):
        un = build_timeline([32768], None, DEFAULT_COST_PARAMS).total_duration
        for c in (512, 2048, 8192, 16384, 24576, 32767):
            ch = build_timeline([32768], c, DEFAULT_COST_PARAMS).total_duration
            assert ch >= un - 1e-12, f"chunk {c} cheaper than unchunked"

    def test_equality_when_all_overheads_zero(self):
        p = CostParams(
            c_lin={OperatorKind.ATTN: 1e-6, OperatorKind.QKV_PROJ: 2e-6},
            c_attn=0.0, c_fix={}, c_chunk=0.0, c_check=0.0, num_layers=2,
        )
        un = build_timeline([1000], None, p).total_duration
        ch = build_timeline([1000], 100, p).total_duration
        assert ch == pytest.approx(un, rel=1e-12)

    def test_monotone_in_tokens_and_layers(self):
        t1 = build_timeline([1000], None, DEFAULT_COST_PARAMS).total_duration
        t2 = build_timeline([1001], None, DEFAULT_COST_PARAMS).total_duration
        assert t2 >= t1
        p4 = CostParams(num_layers=4)
        p5 = CostParams(num_layers=5)
        assert (
            build_timeline([500], None, p5).total_duration
            >= build_timeline([500], None, p4).total_duration
        )

    def test_split_sums_to_total(self):
        tl = build_timeline([5000], 2048, DEFAULT_COST_PARAMS)
        for cut in (1, len(tl) // 2, len(tl) - 1):
            left = math.fsum(e.duration for e in tl.entries[:cut])
            right = math.fsum(e.duration for e in tl.entries[cut:])
            assert left + right == pytest.approx(tl.total_duration, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            build_timeline([], None, DEFAULT_COST_PARAMS)
        with pytest.raises(ValueError):
            build_timeline([0], None, DEFAULT_COST_PARAMS)
        with pytest.raises(ValueError):
            build_timeline([10], 0, DEFAULT_COST_PARAMS)


class TestFit:
    def test_exact_linear(self):
        samples = [(x, 2.0 * x) for x in (1, 10, 100, 1000)]
        poly = fit_ttft_poly(samples, 1)
        assert poly.coefficients[1] == pytest.approx(2.0, abs=1e-9)
        assert poly.coefficients[0] == pytest.approx(0.0, abs=1e-9)
        assert predict_latency(100, poly) == pytest.approx(200.0, abs=1e-6)

    def test_self_consistency_r2(self):
        # Degree-2 fit against the cost model's own totals generalizes to
        # held-out token counts.
        fit_tokens = [256 * 2**k for k in range(0, 8)]  # 256..32768
        samples = [
            (n, build_timeline([n], None, DEFAULT_COST_PARAMS).total_duration)
            for n in fit_tokens
        ]
        poly = fit_ttft_poly(samples, 2)
        held = [384, 1500, 5000, 12000, 20000, 30000]
        held_samples = [
            (n, build_timeline([n], None, DEFAULT_COST_PARAMS).total_duration)
            for n in held
        ]
        q = fit_quality(held_samples, poly)
        assert q["r2"] >= 0.99

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_ttft_poly([(10, 1.0)], 2)

    def test_rank_deficiency(self):
        with pytest.raises(ValueError):
            fit_ttft_poly([(10, 1.0), (10, 2.0), (10, 3.0)], 2)

    def test_bad_degree(self):
        samples = [(x, x) for x in range(10)]
        for d in (0, 4):
            with pytest.raises(ValueError):
                fit_ttft_poly(samples, d)

    def test_decreasing_fit_rejected(self):
        samples = [(x, 100.0 - x) for x in (1, 10, 50, 90)]
        with pytest.raises(ValueError, match="decreasing"):
            fit_ttft_poly(samples, 1)


class TestPredict:
    def test_zero_poly(self):
        poly = TtftPoly((0.0, 0.0))
        for n in (1, 100, 10**6):
            assert predict_latency(n, poly) == 0.0

    def test_clamped_nonnegative(self):
        poly = TtftPoly((-5.0, 0.001))
        assert predict_latency(10, poly) == 0.0

    def test_precondition(self):
        with pytest.raises(ValueError):
            predict_latency(0, TtftPoly((0.0, 1.0)))

    def test_within_ten_percent_of_cost_model(self):
        poly = self_calibrated_poly(DEFAULT_COST_PARAMS, degree=2)
        for n in (256, 590, 1024, 5976, 6833, 16384, 32768):
            actual = build_timeline([n], None, DEFAULT_COST_PARAMS).total_duration
            pred = predict_latency(n, poly)
            assert abs(pred - actual) / actual <= 0.10


class TestParams:
    def test_json_round_trip(self, tmp_path):
        import json

        p = DEFAULT_COST_PARAMS
        path = tmp_path / "cost.json"
        path.write_text(json.dumps(p.to_json_dict()))
        q = CostParams.from_file(str(path))
        assert q == p

    def test_validation(self):
        with pytest.raises(ValueError):
            CostParams(num_layers=0)
        with pytest.raises(ValueError):
            CostParams(arch="rnn")
        with pytest.raises(ValueError):
            CostParams(c_attn=-1.0)
        with pytest.raises(ValueError):
            CostParams(tp_degree=0)

    def test_default_sanity(self):
        # The default preemption-check cost stays well under any operator.
        assert DEFAULT_COST_PARAMS.c_check <= 1e-5
        one_tok = min(
            operator_duration(k, 1, 0, DEFAULT_COST_PARAMS)
            for k in DENSE_LAYER_OPS
        )
        assert DEFAULT_COST_PARAMS.c_check < one_tok / 10
