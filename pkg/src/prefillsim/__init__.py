"""prefillsim: trace-driven discrete-event simulation of SLO-aware prefill
scheduling with operator-level cooperative preemption."""

from .cost_model import (
    CostParams,
    DEFAULT_COST_PARAMS,
    OperatorKind,
    OperatorTimeline,
    TtftPoly,
    build_timeline,
    fit_ttft_poly,
    operator_duration,
    predict_latency,
    self_calibrated_poly,
)
from .engine import (
    Engine,
    ExecutionPool,
    ExecutionTask,
    PreemptionGranularity,
    RequestOutcome,
    RunResult,
    SchedulerInvariantError,
    TaskState,
    run,
    tp_sync_check,
)
from .metrics import (
    InfeasibleSearchError,
    RunConfig,
    SearchResult,
    blocking_stats,
    goodput_search,
    min_slo_scale_search,
    slo_attainment,
)
from .scheduler import (
    Command,
    PolicyConfig,
    PolicyKind,
    SchedulerState,
    priority,
    schedule_round,
    slack,
    slo_aware_batching,
)
from .workload import (
    Request,
    TaskClass,
    Trace,
    TraceFormatError,
    default_task_classes,
    generate_trace,
    load_trace,
    save_trace,
    scale_rate,
    scale_slo,
)

__version__ = "0.1.0"
