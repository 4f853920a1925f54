from .engine import (
    TASKS,
    Collaborator,
    CollaboratorFailure,
    FederationState,
    Task,
    WorkflowSpec,
    next_task,
    run_round,
    run_workflow,
)
from .fedavg import AllZeroWeights, EmptyUpdateSet, KeyMismatch, aggregate_metrics, fedavg
from .wire import (
    METRIC_KEYS,
    BadMagic,
    DuplicateTensorName,
    ModelUpdate,
    TruncatedPayload,
    UnsupportedVersion,
    WireError,
    decode_update,
    encode_update,
)

__all__ = [
    "TASKS", "AllZeroWeights", "BadMagic", "Collaborator", "CollaboratorFailure", "DuplicateTensorName",
    "EmptyUpdateSet", "FederationState", "KeyMismatch", "METRIC_KEYS", "ModelUpdate", "Task",
    "TruncatedPayload", "UnsupportedVersion", "WireError", "WorkflowSpec", "aggregate_metrics",
    "decode_update", "encode_update", "fedavg", "next_task", "run_round", "run_workflow",
]
