from types import SimpleNamespace

import pytest

from prefillsim.cost_model import TtftPoly
from prefillsim.engine import PreemptionGranularity as G
from prefillsim.scheduler import (
    PolicyConfig,
    PolicyKind,
    SchedulerState,
    priority,
    schedule_round,
    slack,
    slo_aware_batching,
)
from prefillsim.workload import Request

ZERO_PRED = TtftPoly((0.0,))
CONST_3 = TtftPoly((3.0,))
LINEAR_1MS = TtftPoly((0.0, 0.001))


def req(id, arrival, slo, tokens=100, task="text"):
    return Request(id, task, arrival, tokens, slo)


def fake_task(task_id, deadline, arrival=0.0, tokens=100, progress=0.0):
    return SimpleNamespace(
        task_id=task_id,
        agg_tokens=tokens,
        head_deadline=deadline,
        head_arrival=arrival,
        progress=lambda: progress,
    )


class TestSlack:
    def test_direct(self):
        # deadline 10, now 2, predicted 3, progress 0 -> 5
        r = req(0, arrival=0.0, slo=10.0)
        assert slack(r, 2.0, CONST_3) == pytest.approx(5.0)

    def test_progress_one(self):
        t = fake_task(0, deadline=10.0, progress=1.0)
        assert slack(t, 4.0, CONST_3, progress=1.0) == pytest.approx(6.0)

    def test_negative(self):
        r = req(0, arrival=0.0, slo=10.0)
        assert slack(r, 9.0, CONST_3) == pytest.approx(-2.0)


class TestPriority:
    def test_sedf_positive_slack_orders_by_deadline(self):
        a = req(0, 0.0, 10.0)   # deadline 10
        b = req(1, 0.0, 20.0)   # deadline 20
        pa = priority(a, 5.0, ZERO_PRED, PolicyKind.SEDF)
        pb = priority(b, 5.0, ZERO_PRED, PolicyKind.SEDF)
        assert pa == pytest.approx(0.1)
        assert pb == pytest.approx(0.05)
        assert pa > pb

    def test_sedf_negative_slack_demoted(self):
        doomed = req(0, 0.0, 10.0)
        healthy = req(1, 0.0, 200.0)
        big_pred = TtftPoly((50.0,))
        pd = priority(doomed, 5.0, big_pred, PolicyKind.SEDF)  # slack -45
        ph = priority(healthy, 5.0, big_pred, PolicyKind.SEDF)  # slack 145
        assert pd == pytest.approx(-0.1)
        assert ph > pd

    def test_sgn_zero_is_positive(self):
        r = req(0, 0.0, 10.0)
        # now 7, predicted 3 -> slack exactly 0
        assert priority(r, 7.0, CONST_3, PolicyKind.SEDF) == pytest.approx(0.1)

    def test_dedf_missed_deadline(self):
        r = req(0, 0.0, 10.0)
        assert priority(r, 15.0, CONST_3, PolicyKind.DEDF) == pytest.approx(-0.1)
        assert priority(r, 5.0, CONST_3, PolicyKind.DEDF) == pytest.approx(0.1)

    def test_edf_ignores_slack(self):
        r = req(0, 0.0, 10.0)
        big_pred = TtftPoly((1e9,))
        assert priority(r, 5.0, big_pred, PolicyKind.EDF) == pytest.approx(0.1)

    def test_fcfs(self):
        early = req(0, 1.0, 10.0)
        late = req(1, 2.0, 1.0)
        pe = priority(early, 5.0, ZERO_PRED, PolicyKind.FCFS)
        pl = priority(late, 5.0, ZERO_PRED, PolicyKind.FCFS)
        assert pe > pl

    def test_nonpositive_deadline(self):
        t = fake_task(0, deadline=0.0)
        with pytest.raises(ValueError):
            priority(t, 1.0, ZERO_PRED, PolicyKind.SEDF)


class TestBatching:
    def test_unconstrained_admission(self):
        h = req(0, 0.0, 1e6, tokens=100)
        c = req(1, 0.0, 1e6, tokens=100)
        agg, batch, adm = slo_aware_batching(h, [c], 4096, ZERO_PRED, 0.0)
        assert agg == 200
        assert [r.id for r in batch] == [0, 1]
        assert len(adm) == 1

    def test_budget_is_strict(self):
        h = req(0, 0.0, 1e6, tokens=2048)
        c = req(1, 0.0, 1e6, tokens=2048)
        agg, batch, _ = slo_aware_batching(h, [c], 4096, ZERO_PRED, 0.0)
        assert agg == 2048 and len(batch) == 1  # n == G rejected

    def test_latency_budget(self):
        # H 1000 tokens, linear 1ms/token predictor: candidate of 100 makes
        # L(1100) = 1.1. T_remain 1.0 rejects; T_remain 1.2 admits.
        c = req(1, 0.0, 1e6, tokens=100)
        h_tight = req(0, 0.0, 1.0, tokens=1000)
        agg, batch, _ = slo_aware_batching(h_tight, [c], 4096, LINEAR_1MS, 0.0)
        assert agg == 1000 and len(batch) == 1
        h_loose = req(0, 0.0, 1.2, tokens=1000)
        agg, batch, _ = slo_aware_batching(h_loose, [c], 4096, LINEAR_1MS, 0.0)
        assert agg == 1100 and len(batch) == 2

    def test_rejection_does_not_stop_scan(self):
        h = req(0, 0.0, 1e6, tokens=100)
        big = req(1, 0.0, 1e6, tokens=5000)
        small = req(2, 0.0, 1e6, tokens=50)
        agg, batch, _ = slo_aware_batching(h, [big, small], 4096, ZERO_PRED, 0.0)
        assert [r.id for r in batch] == [0, 2]
        assert agg == 150

    def test_head_admitted_even_over_budget(self):
        h = req(0, 0.0, 1e6, tokens=9999)
        agg, batch, _ = slo_aware_batching(h, [], 4096, ZERO_PRED, 0.0)
        assert agg == 9999 and len(batch) == 1


def fresh_state(policy=PolicyKind.SEDF, granularity=G.OPERATOR, budget=4096):
    cfg = PolicyConfig(policy=policy, granularity=granularity,
                       batch_budget_tokens=budget)
    return SchedulerState.create(cfg, ZERO_PRED)


class TestScheduleRound:
    def test_empty(self):
        state = fresh_state()
        assert schedule_round(state, 0.0, []) == []

    def test_first_arrival_submits(self):
        state = fresh_state()
        a = req(0, 0.0, 6.0, tokens=8192, task="file")
        cmds = schedule_round(state, 0.0, [a])
        assert [c.kind for c in cmds] == ["submit"]
        assert cmds[0].members == (a,)
        assert state.running == cmds[0].task_id
        assert state.q_waiting == {}

    def test_preempt_then_submit_then_resume(self):
        state = fresh_state()
        a = req(0, 0.0, 6.0, tokens=8192, task="file")
        (submit_a,) = schedule_round(state, 0.0, [a])
        task_a = fake_task(submit_a.task_id, deadline=a.deadline,
                           arrival=0.0, tokens=8192)
        state.attach_task(task_a)

        b = req(1, 0.05, 0.25, tokens=256)
        cmds = schedule_round(state, 0.05, [b])
        assert [c.kind for c in cmds] == ["preempt", "submit"]
        assert cmds[0].task_id == task_a.task_id
        assert cmds[1].members == (b,)
        task_b = fake_task(cmds[1].task_id, deadline=b.deadline,
                           arrival=0.05, tokens=256)
        state.attach_task(task_b)
        assert state.running == task_b.task_id
        assert task_a.task_id in state.q_preempted

        state.note_completion(task_b.task_id)
        cmds = schedule_round(state, 0.2, [])
        assert [c.kind for c in cmds] == ["resume"]
        assert cmds[0].task_id == task_a.task_id
        assert state.running == task_a.task_id
        assert state.q_preempted == {}

    def test_running_task_on_top_is_noop(self):
        state = fresh_state()
        a = req(0, 0.0, 0.25, tokens=100)
        (submit_a,) = schedule_round(state, 0.0, [a])
        state.attach_task(fake_task(submit_a.task_id, deadline=a.deadline, tokens=100))
        b = req(1, 0.01, 6.0, tokens=100)  # lower priority than running A
        assert schedule_round(state, 0.01, [b]) == []
        assert 1 in state.q_waiting

    def test_none_granularity_never_preempts(self):
        state = fresh_state(granularity=G.NONE)
        a = req(0, 0.0, 6.0, tokens=8192, task="file")
        (submit_a,) = schedule_round(state, 0.0, [a])
        state.attach_task(fake_task(submit_a.task_id, deadline=a.deadline, tokens=8192))
        b = req(1, 0.05, 0.25, tokens=256)
        assert schedule_round(state, 0.05, [b]) == []
        # after completion the waiting request is picked up
        state.note_completion(submit_a.task_id)
        cmds = schedule_round(state, 1.0, [])
        assert [c.kind for c in cmds] == ["submit"]
        assert cmds[0].members[0].id == 1

    def test_batch_forms_and_audit_recorded(self):
        state = fresh_state()
        h = req(0, 0.0, 5.0, tokens=500)
        c1 = req(1, 0.0, 5.0, tokens=600)
        c2 = req(2, 0.0, 5.0, tokens=100000)  # over budget, rejected
        cmds = schedule_round(state, 0.0, [h, c1, c2])
        (submit,) = cmds
        assert {r.id for r in submit.members} == {0, 1}
        assert submit.agg_tokens == 1100
        assert 2 in state.q_waiting
        (audit,) = state.batch_audit
        assert audit.agg_tokens == 1100
        assert len(audit.admissions) == 1

    def test_candidates_exclude_preempted_and_running(self):
        state = fresh_state()
        a = req(0, 0.0, 6.0, tokens=1000, task="file")
        (submit_a,) = schedule_round(state, 0.0, [a])
        state.attach_task(fake_task(submit_a.task_id, deadline=a.deadline,
                                    tokens=1000))
        b = req(1, 0.05, 0.25, tokens=100)
        cmds = schedule_round(state, 0.05, [b])
        submit_b = cmds[1]
        assert submit_b.members == (b,)  # A's task is not foldable into B

    def test_tie_break_earlier_arrival_then_lower_id(self):
        state = fresh_state()
        x = req(7, 1.0, 9.0)   # same deadline 10
        y = req(3, 0.0, 10.0)  # same deadline 10, earlier arrival
        cmds = schedule_round(state, 12.0, [x, y])
        (submit,) = cmds
        assert submit.members[0].id == 3
