import pytest

from prefillsim.cost_model import OperatorKind, OperatorTimeline, TimelineEntry
from prefillsim.engine import ExecutionTask
from prefillsim.workload import Request


def make_task(
    task_id: int,
    layers: int,
    ops_per_layer: int,
    op_duration: float = 1.0,
    chunks: int = 1,
    request: Request | None = None,
) -> ExecutionTask:
    """Hand-built task with a uniform timeline, for engine-level tests."""
    kinds = [
        OperatorKind.QKV_PROJ,
        OperatorKind.ATTN,
        OperatorKind.O_PROJ,
        OperatorKind.GATE_UP_PROJ,
        OperatorKind.DOWN_PROJ,
    ]
    entries = []
    for c in range(chunks):
        for layer in range(layers):
            for op in range(ops_per_layer):
                entries.append(
                    TimelineEntry(layer, c, kinds[op % len(kinds)], op_duration)
                )
    timeline = OperatorTimeline(tuple(entries), sum(e.duration for e in entries))
    req = request or Request(100 + task_id, "text", 0.0, 128, 1e9)
    return ExecutionTask(task_id, [req], timeline)


@pytest.fixture
def two_request_trace_path():
    import os

    return os.path.join(os.path.dirname(__file__), "fixtures", "two_request_trace.jsonl")


@pytest.fixture
def golden_events_path():
    import os

    return os.path.join(os.path.dirname(__file__), "golden", "two_request_events.jsonl")
