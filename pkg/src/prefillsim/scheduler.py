"""SLO-aware scheduling policy: slack-based priorities, deadline-budgeted
batching, and the event-driven scheduling round.

Priorities follow sgn(slack) / deadline for the slack-aware policy, where
slack is the deadline margin left after the predicted remaining latency.
Baselines reuse the same round logic with different priority functions:
plain earliest-deadline-first, a deadline-aware variant that only demotes
requests whose deadlines have already passed, and FCFS.

A round runs only on arrival or completion events. It ranks every live
request and task, batches the top waiting request with compatible waiting
requests under the token budget, and emits at most one preempt followed by
at most one submit-or-resume.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .cost_model import TtftPoly, predict_latency
from .engine import PreemptionGranularity
from .workload import Request


class PolicyKind(str, enum.Enum):
    SEDF = "sedf"
    EDF = "edf"
    DEDF = "dedf"
    FCFS = "fcfs"


@dataclass(frozen=True)
class PolicyConfig:
    """Scheduler knobs; ``predictor=None`` self-calibrates at run start."""

    policy: PolicyKind = PolicyKind.SEDF
    granularity: PreemptionGranularity = PreemptionGranularity.OPERATOR
    chunk_tokens: Optional[int] = None
    batch_budget_tokens: int = 4096
    predictor_degree: int = 2
    predictor: Optional[TtftPoly] = None

    def __post_init__(self) -> None:
        if self.chunk_tokens is not None and self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1 when given")
        if self.batch_budget_tokens < 1:
            raise ValueError("batch_budget_tokens must be >= 1")


def _sgn(x: float) -> float:
    # Non-negative slack counts as feasible.
    return 1.0 if x >= 0 else -1.0


def _fields(item) -> tuple[float, float, float, float]:
    """(tokens, deadline, arrival, progress) for a request or a task."""
    if isinstance(item, Request):
        return float(item.num_tokens), item.deadline, item.arrival_time, 0.0
    return float(item.agg_tokens), item.head_deadline, item.head_arrival, item.progress()


def slack(item, now: float, predictor: TtftPoly, progress: float = 0.0) -> float:
    """Deadline margin after the predicted remaining latency.

    Remaining latency scales the aggregate-token prediction by the fraction
    of work left; waiting requests have progress 0.
    """
    tokens, deadline, _, _ = _fields(item)
    remaining = predict_latency(max(tokens, 1.0), predictor) * (1.0 - progress)
    return deadline - now - remaining


def priority(item, now: float, predictor: TtftPoly, policy: PolicyKind) -> float:
    """Scalar priority; larger runs first. Only the ordering is meaningful."""
    tokens, deadline, arrival, progress = _fields(item)
    if deadline <= 0:
        raise ValueError(f"non-positive deadline {deadline}")
    if policy is PolicyKind.SEDF:
        return _sgn(slack(item, now, predictor, progress)) / deadline
    if policy is PolicyKind.EDF:
        return 1.0 / deadline
    if policy is PolicyKind.DEDF:
        return _sgn(deadline - now) / deadline
    return -arrival  # FCFS


def slo_aware_batching(
    head: Request,
    candidates: Sequence[Request],
    budget: int,
    predictor: TtftPoly,
    now: float,
) -> tuple[int, list[Request], list[tuple[int, float, float]]]:
    """Fold compatible candidates into the head request's batch.

    Candidates must already be ordered by descending priority. Each is
    admitted iff the head's remaining deadline budget exceeds the predicted
    latency of the grown batch and the aggregate stays under the token
    budget. Returns (aggregate tokens, batch, admission audit), the audit
    holding (aggregate, predicted latency, remaining budget) per admission.
    """
    batch = [head]
    t_remain = head.deadline - now
    agg = head.num_tokens
    admissions: list[tuple[int, float, float]] = []
    for r in candidates:
        n = agg + r.num_tokens
        latency = predict_latency(n, predictor)
        if t_remain > latency and n < budget:
            batch.append(r)
            agg = n
            admissions.append((n, latency, t_remain))
    return agg, batch, admissions


@dataclass(frozen=True)
class Command:
    """One execution-pool command emitted by a scheduling round."""

    kind: str  # "submit" | "preempt" | "resume"
    task_id: int
    members: tuple[Request, ...] = ()
    agg_tokens: int = 0


@dataclass(frozen=True)
class BatchAudit:
    """Record of one emitted batch, for the batching-safety property."""

    time: float
    task_id: int
    members: tuple[int, ...]
    agg_tokens: int
    budget: int
    admissions: tuple[tuple[int, float, float], ...]


@dataclass
class SchedulerState:
    """Waiting queue, preempted queue, and the current execution."""

    policy: PolicyKind
    granularity: PreemptionGranularity
    batch_budget: int
    predictor: TtftPoly
    q_waiting: dict[int, Request] = field(default_factory=dict)
    q_preempted: dict[int, object] = field(default_factory=dict)
    running: Optional[int] = None
    task_table: dict[int, object] = field(default_factory=dict)
    batch_audit: list[BatchAudit] = field(default_factory=list)
    _next_task_id: int = 0

    @classmethod
    def create(cls, cfg: PolicyConfig, predictor: TtftPoly) -> "SchedulerState":
        return cls(
            policy=cfg.policy,
            granularity=cfg.granularity,
            batch_budget=cfg.batch_budget_tokens,
            predictor=predictor,
        )

    def attach_task(self, task) -> None:
        """Register the engine-built task object for future priority lookups."""
        self.task_table[task.task_id] = task

    def note_completion(self, task_id: int) -> None:
        if self.running == task_id:
            self.running = None
        self.q_preempted.pop(task_id, None)
        self.task_table.pop(task_id, None)


def schedule_round(
    state: SchedulerState, now: float, new_arrivals: Sequence[Request]
) -> list[Command]:
    """One event-driven scheduling round.

    Enqueues arrivals, ranks all live requests and tasks by descending
    priority (ties: earlier arrival, tasks before requests, lower id), and,
    unless the running task is already on top, preempts it and submits the
    batched top waiting request or resumes the top preempted task. With
    preemption disabled the round waits for the completion event instead.
    """
    for r in new_arrivals:
        state.q_waiting[r.id] = r

    entries: list[tuple[tuple, str, object]] = []
    for r in state.q_waiting.values():
        p = priority(r, now, state.predictor, state.policy)
        entries.append(((-p, r.arrival_time, 1, r.id), "waiting", r))
    for t in state.q_preempted.values():
        p = priority(t, now, state.predictor, state.policy)
        entries.append(((-p, t.head_arrival, 0, t.task_id), "preempted", t))
    if state.running is not None:
        t = state.task_table[state.running]
        p = priority(t, now, state.predictor, state.policy)
        entries.append(((-p, t.head_arrival, 0, t.task_id), "running", t))
    if not entries:
        return []

    entries.sort(key=lambda e: e[0])
    _, head_kind, head = entries[0]
    if head_kind == "running":
        return []
    if state.running is not None and state.granularity is PreemptionGranularity.NONE:
        return []

    cmds: list[Command] = []
    if state.running is not None:
        victim = state.running
        cmds.append(Command("preempt", task_id=victim))
        state.q_preempted[victim] = state.task_table[victim]
        state.running = None

    if head_kind == "waiting":
        candidates = [obj for _, kind, obj in entries[1:] if kind == "waiting"]
        agg, batch, admissions = slo_aware_batching(
            head, candidates, state.batch_budget, state.predictor, now
        )
        task_id = state._next_task_id
        state._next_task_id += 1
        for r in batch:
            del state.q_waiting[r.id]
        state.batch_audit.append(
            BatchAudit(
                time=now,
                task_id=task_id,
                members=tuple(r.id for r in batch),
                agg_tokens=agg,
                budget=state.batch_budget,
                admissions=tuple(admissions),
            )
        )
        cmds.append(
            Command("submit", task_id=task_id, members=tuple(batch), agg_tokens=agg)
        )
        state.running = task_id
    else:
        task_id = head.task_id
        del state.q_preempted[task_id]
        cmds.append(Command("resume", task_id=task_id))
        state.running = task_id
    return cmds
