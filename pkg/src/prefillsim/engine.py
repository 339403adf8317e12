"""Deterministic discrete-event core: virtual time, the execution pool, and
the cooperative preemption handshake.

The pool runs at most one task at any instant. Submitting a task schedules
one boundary event per timeline entry (each boundary adds the preemption
check overhead) plus a completion event at the final boundary. A preemption
signal resolves to an acknowledgment at the end of the boundary-eligible
entry in progress under the configured granularity; at the ACK the task is
frozen at its cursor, its remaining events are invalidated, and the
(signal, ack) interval is appended to the blocking log. Resuming reschedules
only the remaining entries, so no completed work is ever re-run.

Scheduling rounds are triggered by arrival and completion events only;
events that land while an ACK is outstanding have their rounds deferred to
the ACK instant, mirroring a scheduler thread that blocks on the handshake.
"""

from __future__ import annotations

import enum
import json
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Callable, Optional, Sequence

from .cost_model import CostParams, OperatorTimeline, build_timeline, self_calibrated_poly
from .workload import Request, Trace


class SchedulerInvariantError(RuntimeError):
    """A scheduler command violated an execution-pool precondition."""


class TaskState(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    PREEMPTED = "preempted"
    DONE = "done"


class PreemptionGranularity(str, enum.Enum):
    OPERATOR = "operator"
    LAYER = "layer"
    CHUNK = "chunk"
    NONE = "none"


def tp_sync_check(lane_counters: Sequence[int]) -> bool:
    """True iff all tensor-parallel lanes sit at the same iteration counter.

    Suspension is only safe when every lane has reached the same boundary;
    in simulation the single logical lane keeps counters synchronized, so
    this is a modeled gate rather than a wait.
    """
    return len(set(lane_counters)) <= 1


class ExecutionTask:
    """A (possibly batched) prefill execution with a progress cursor."""

    __slots__ = (
        "task_id",
        "member_requests",
        "agg_tokens",
        "timeline",
        "durations",
        "cum",
        "layer_last",
        "chunk_last",
        "cursor",
        "state",
        "generation",
        "resume_count",
        "head_deadline",
        "head_arrival",
        "executed_s",
        "_seg_start_time",
        "_seg_start_cursor",
        "_seg_ends",
    )

    def __init__(self, task_id: int, members: Sequence[Request], timeline: OperatorTimeline):
        self.task_id = task_id
        self.member_requests = tuple(members)
        self.agg_tokens = sum(r.num_tokens for r in members)
        self.timeline = timeline
        self.durations = [e.duration for e in timeline.entries]
        cum = [0.0]
        for d in self.durations:
            cum.append(cum[-1] + d)
        self.cum = cum
        n = len(self.durations)
        entries = timeline.entries
        self.layer_last = [
            i == n - 1
            or entries[i + 1].chunk != entries[i].chunk
            or entries[i + 1].layer != entries[i].layer
            for i in range(n)
        ]
        self.chunk_last = [
            i == n - 1 or entries[i + 1].chunk != entries[i].chunk for i in range(n)
        ]
        self.cursor = 0
        self.state = TaskState.PENDING
        self.generation = 0
        self.resume_count = 0
        head = self.member_requests[0]
        self.head_deadline = head.deadline
        self.head_arrival = head.arrival_time
        self.executed_s = 0.0
        self._seg_start_time = 0.0
        self._seg_start_cursor = 0
        self._seg_ends: list[float] = []

    def __len__(self) -> int:
        return len(self.durations)

    def progress(self) -> float:
        """Fraction of timeline duration completed, quantized to boundaries."""
        total = self.cum[-1]
        if total <= 0:
            return 1.0
        return self.cum[self.cursor] / total

    def boundary_eligible(self, i: int, granularity: PreemptionGranularity) -> bool:
        if granularity is PreemptionGranularity.OPERATOR:
            return True
        if granularity is PreemptionGranularity.LAYER:
            return self.layer_last[i]
        if granularity is PreemptionGranularity.CHUNK:
            return self.chunk_last[i]
        return False


@dataclass
class ExecutionPool:
    """Single-occupancy execution slot plus preserved preempted state."""

    current: Optional[int] = None
    preempted: set[int] = field(default_factory=set)
    pending_signal: bool = False
    blocking_log: list[tuple[float, float, int]] = field(default_factory=list)


# Heap event kinds, ordered only by (time, seq).
_ARRIVAL = 0
_BOUNDARY = 1
_COMPLETION = 2
_ACK = 3


class Engine:
    """Event queue plus execution pool; scheduler-agnostic.

    Hooks ``on_arrival(request_index, now)``, ``on_completion(task, now)``
    and ``on_ack(task, now)`` are invoked as the corresponding events pop.
    """

    def __init__(
        self,
        params: CostParams,
        granularity: PreemptionGranularity,
        on_arrival: Optional[Callable[[int, float], None]] = None,
        on_completion: Optional[Callable[[ExecutionTask, float], None]] = None,
        on_ack: Optional[Callable[[ExecutionTask, float], None]] = None,
    ):
        self.params = params
        self.granularity = granularity
        self.pool = ExecutionPool()
        self.tasks: dict[int, ExecutionTask] = {}
        self.now = 0.0
        self._heap: list[tuple] = []
        self._seq = 0
        self._signal_time = 0.0
        self.on_arrival = on_arrival
        self.on_completion = on_completion
        self.on_ack = on_ack

    def _push(self, time: float, kind: int, a: int = 0, b: int = 0, c: int = 0) -> None:
        heappush(self._heap, (time, self._seq, kind, a, b, c))
        self._seq += 1

    def push_arrival(self, time: float, request_index: int) -> None:
        self._push(time, _ARRIVAL, request_index)

    def add_task(self, task: ExecutionTask) -> None:
        if task.task_id in self.tasks:
            raise SchedulerInvariantError(f"duplicate task id {task.task_id}")
        self.tasks[task.task_id] = task

    def _schedule_segment(self, task: ExecutionTask, now: float) -> float:
        """Schedule boundary + completion events for entries from the cursor."""
        task._seg_start_time = now
        task._seg_start_cursor = task.cursor
        ends: list[float] = []
        t = now
        for i in range(task.cursor, len(task)):
            t += task.durations[i] + self.params.c_check
            ends.append(t)
            self._push(t, _BOUNDARY, task.task_id, i, task.generation)
        task._seg_ends = ends
        self._push(t, _COMPLETION, task.task_id, task.generation)
        return t

    def submit(self, task: ExecutionTask, now: float) -> float:
        """Start a pending task; returns the scheduled completion time."""
        if self.pool.current is not None:
            raise SchedulerInvariantError(
                f"submit of task {task.task_id} at t={now}: pool occupied by {self.pool.current}"
            )
        if task.state is not TaskState.PENDING:
            raise SchedulerInvariantError(
                f"submit of task {task.task_id}: state is {task.state.value}, not pending"
            )
        task.state = TaskState.RUNNING
        self.pool.current = task.task_id
        return self._schedule_segment(task, now)

    def resume(self, task_id: int, now: float) -> float:
        """Continue a preempted task from its frozen cursor."""
        task = self.tasks.get(task_id)
        if task is None or task_id not in self.pool.preempted:
            raise SchedulerInvariantError(f"resume of unknown/unpreempted task {task_id} at t={now}")
        if self.pool.current is not None:
            raise SchedulerInvariantError(
                f"resume of task {task_id} at t={now}: pool occupied by {self.pool.current}"
            )
        if task.state is not TaskState.PREEMPTED:
            raise SchedulerInvariantError(
                f"resume of task {task_id}: state is {task.state.value}, not preempted"
            )
        self.pool.preempted.discard(task_id)
        task.state = TaskState.RUNNING
        task.resume_count += 1
        self.pool.current = task_id
        return self._schedule_segment(task, now)

    def signal_preempt(self, now: float) -> float:
        """Set the preemption signal; returns the acknowledgment time.

        The ACK lands at the end of the boundary-eligible entry in progress
        at ``now`` (immediately, if ``now`` coincides with such a boundary).
        State transitions happen when the ACK event is processed.
        """
        if self.pool.current is None:
            raise SchedulerInvariantError(f"preempt signal at t={now} with empty pool")
        if self.pool.pending_signal:
            raise SchedulerInvariantError(f"double preempt signal at t={now}")
        if self.granularity is PreemptionGranularity.NONE:
            raise SchedulerInvariantError("preempt signal with preemption disabled")
        task = self.tasks[self.pool.current]
        if not tp_sync_check([task.cursor] * self.params.tp_degree):
            raise SchedulerInvariantError("tensor-parallel lanes out of sync")

        ends = task._seg_ends
        base = task._seg_start_cursor
        rel = bisect_left(ends, now)
        if rel >= len(ends):
            raise SchedulerInvariantError(
                f"preempt signal at t={now} past completion of task {task.task_id}"
            )
        i = base + rel
        while not task.boundary_eligible(i, self.granularity):
            i += 1
        ack_time = ends[i - base]
        self.pool.pending_signal = True
        self._signal_time = now
        self._push(ack_time, _ACK, task.task_id, i)
        return ack_time

    def _finalize_completion(self, task: ExecutionTask, now: float) -> None:
        task.cursor = len(task)
        task.state = TaskState.DONE
        task.executed_s += now - task._seg_start_time
        self.pool.current = None

    def _finalize_ack(self, task: ExecutionTask, ack_index: int, now: float) -> None:
        if task.state is not TaskState.DONE:
            # Normal path: freeze at the acknowledged boundary and invalidate
            # the segment's remaining events. If the ACK coincides with the
            # final boundary the completion event has already won.
            task.cursor = ack_index + 1
            task.state = TaskState.PREEMPTED
            task.generation += 1
            task.executed_s += now - task._seg_start_time
            self.pool.current = None
            self.pool.preempted.add(task.task_id)
        self.pool.blocking_log.append((self._signal_time, now, task.task_id))
        self.pool.pending_signal = False

    def step(self) -> bool:
        """Process one event; returns False when the queue is drained."""
        if not self._heap:
            return False
        time, _, kind, a, b, c = heappop(self._heap)
        assert time >= self.now - 1e-12, "event time regression"
        self.now = time
        if kind == _BOUNDARY:
            # a=task, b=entry index, c=generation; stale generations are
            # leftovers of a cancelled segment.
            task = self.tasks[a]
            if c == task.generation and task.state is TaskState.RUNNING:
                task.cursor = b + 1
        elif kind == _COMPLETION:
            task = self.tasks[a]
            if b == task.generation and task.state is TaskState.RUNNING:
                self._finalize_completion(task, time)
                if self.on_completion:
                    self.on_completion(task, time)
        elif kind == _ACK:
            task = self.tasks[a]
            self._finalize_ack(task, b, time)
            if self.on_ack:
                self.on_ack(task, time)
        elif kind == _ARRIVAL:
            if self.on_arrival:
                self.on_arrival(a, time)
        return True


@dataclass(frozen=True)
class RequestOutcome:
    """Per-request result: TTFT against the request's own SLO."""

    id: int
    task: str
    arrival_s: float
    tokens: int
    slo_s: float
    prefill_end_s: float

    @property
    def ttft_s(self) -> float:
        return self.prefill_end_s - self.arrival_s

    @property
    def met(self) -> bool:
        return self.ttft_s <= self.slo_s


@dataclass(frozen=True)
class TaskStats:
    task_id: int
    members: tuple[int, ...]
    agg_tokens: int
    n_entries: int
    total_s: float
    executed_s: float
    max_entry_s: float
    resume_count: int


@dataclass
class RunResult:
    """Everything a single simulation produces."""

    outcomes: list[RequestOutcome]
    blocking_log: list[tuple[float, float, int]]
    rounds: int
    commands: dict[str, int]
    tasks: list[TaskStats]
    batch_audit: list
    seed: int
    policy: str
    granularity: str
    events: Optional[list[dict]] = None

    @property
    def num_requests(self) -> int:
        return len(self.outcomes)

    def write_event_log(self, path: str) -> None:
        if self.events is None:
            raise ValueError("run was not recorded with record_events=True")
        from .files import atomic_write_text

        atomic_write_text(
            path, "".join(json.dumps(ev, sort_keys=True) + "\n" for ev in self.events)
        )


def run(
    trace: Trace,
    policy_config,
    cost_params: CostParams,
    seed: int = 0,
    record_events: bool = False,
) -> RunResult:
    """Drive one simulation of ``trace`` under the given policy and costs.

    Arrival and completion events trigger scheduling rounds; the returned
    commands are executed through the pool (a round's submit/resume follows
    its preempt's ACK). Fully deterministic.
    """
    from .scheduler import SchedulerState, schedule_round

    predictor = policy_config.predictor
    if predictor is None:
        predictor = self_calibrated_poly(
            cost_params,
            degree=policy_config.predictor_degree,
            chunk_size=policy_config.chunk_tokens,
        )
    state = SchedulerState.create(policy_config, predictor)

    outcomes: dict[int, RequestOutcome] = {}
    events: Optional[list[dict]] = [] if record_events else None
    counts = {"submit": 0, "preempt": 0, "resume": 0}
    rounds = 0
    followup: list = []
    buffered: deque = deque()

    def log(kind: str, task: Optional[int], now: float, **detail) -> None:
        if events is not None:
            events.append({"t": now, "kind": kind, "task": task, "detail": detail})

    def do_round(now: float, arrivals: list[Request]) -> None:
        nonlocal rounds
        rounds += 1
        cmds = schedule_round(state, now, arrivals)
        execute(cmds, now)

    def execute(cmds: list, now: float) -> None:
        nonlocal followup
        if not cmds:
            return
        if cmds[0].kind == "preempt":
            counts["preempt"] += 1
            log("preempt_signal", cmds[0].task_id, now)
            engine.signal_preempt(now)
            followup = list(cmds[1:])
        else:
            run_now(cmds, now)

    def run_now(cmds: list, now: float) -> None:
        for c in cmds:
            if c.kind == "submit":
                timeline = build_timeline(
                    [r.num_tokens for r in c.members],
                    policy_config.chunk_tokens,
                    cost_params,
                )
                task = ExecutionTask(c.task_id, c.members, timeline)
                engine.add_task(task)
                engine.submit(task, now)
                state.attach_task(task)
                counts["submit"] += 1
                log(
                    "submit",
                    c.task_id,
                    now,
                    members=[r.id for r in c.members],
                    tokens=task.agg_tokens,
                )
            elif c.kind == "resume":
                task = engine.tasks[c.task_id]
                engine.resume(c.task_id, now)
                counts["resume"] += 1
                log("resume", c.task_id, now, cursor=task.cursor)
            else:
                raise SchedulerInvariantError(f"unexpected command {c.kind} at t={now}")

    def on_arrival(req_index: int, now: float) -> None:
        req = trace.requests[req_index]
        log("arrival", None, now, request=req.id, tokens=req.num_tokens)
        if engine.pool.pending_signal:
            buffered.append(("arrival", req))
        else:
            do_round(now, [req])

    def on_completion(task: ExecutionTask, now: float) -> None:
        for r in task.member_requests:
            outcomes[r.id] = RequestOutcome(
                id=r.id,
                task=r.task,
                arrival_s=r.arrival_time,
                tokens=r.num_tokens,
                slo_s=r.ttft_slo,
                prefill_end_s=now,
            )
        log("completion", task.task_id, now, requests=[r.id for r in task.member_requests])
        if engine.pool.pending_signal:
            buffered.append(("completion", task.task_id))
        else:
            state.note_completion(task.task_id)
            do_round(now, [])

    def on_ack(task: ExecutionTask, now: float) -> None:
        nonlocal followup
        signal_t, ack_t, _ = engine.pool.blocking_log[-1]
        log("preempt_ack", task.task_id, now, blocking_s=ack_t - signal_t, cursor=task.cursor)
        pending, followup = followup, []
        run_now(pending, now)
        while buffered and not engine.pool.pending_signal:
            kind, payload = buffered.popleft()
            if kind == "arrival":
                do_round(now, [payload])
            else:
                state.note_completion(payload)
                do_round(now, [])

    engine = Engine(
        cost_params,
        policy_config.granularity,
        on_arrival=on_arrival,
        on_completion=on_completion,
        on_ack=on_ack,
    )
    for idx, r in enumerate(trace.requests):
        engine.push_arrival(r.arrival_time, idx)

    while engine.step():
        pass

    if len(outcomes) != len(trace.requests):
        missing = {r.id for r in trace.requests} - set(outcomes)
        raise SchedulerInvariantError(f"requests never completed: {sorted(missing)[:10]}")

    task_stats = [
        TaskStats(
            task_id=t.task_id,
            members=tuple(r.id for r in t.member_requests),
            agg_tokens=t.agg_tokens,
            n_entries=len(t),
            total_s=t.timeline.total_duration,
            executed_s=t.executed_s,
            max_entry_s=t.timeline.max_entry_duration(),
            resume_count=t.resume_count,
        )
        for t in engine.tasks.values()
    ]
    return RunResult(
        outcomes=[outcomes[r.id] for r in trace.requests],
        blocking_log=list(engine.pool.blocking_log),
        rounds=rounds,
        commands=counts,
        tasks=task_stats,
        batch_audit=list(state.batch_audit),
        seed=seed,
        policy=policy_config.policy.value,
        granularity=policy_config.granularity.value,
        events=events,
    )
