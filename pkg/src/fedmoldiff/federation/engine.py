"""Aggregator-side workflow engine and the in-process collaborator.

Round structure::

    Start -> [AggregatedModelValidation -> Train -> LocalModelValidation -> Join] * R -> End

The aggregator only ever handles :class:`ModelUpdate` objects; collaborator
handles expose a single ``run_tasks`` entry point and keep their data,
normaliser and optimiser state to themselves.
"""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

from ..models.params import ParamStore
from ..training import Site
from .fedavg import aggregate_metrics, fedavg
from .wire import ModelUpdate

log = logging.getLogger(__name__)


class Task(str, enum.Enum):
    START = "start"
    AGGREGATED_MODEL_VALIDATION = "aggregated_model_validation"
    TRAIN = "train"
    LOCAL_MODEL_VALIDATION = "local_model_validation"
    JOIN = "join"
    END = "end"


TASKS = tuple(Task)


class CollaboratorFailure(RuntimeError):
    def __init__(self, collaborator_id: str, cause: BaseException | None = None):
        super().__init__(f"collaborator {collaborator_id!r} failed: {cause!r}")
        self.collaborator_id = collaborator_id
        self.cause = cause


def next_task(task: Task, completed_rounds: int, rounds: int) -> Task:
    """Transition function of the workflow state machine."""
    if task is Task.START:
        return Task.AGGREGATED_MODEL_VALIDATION if rounds > 0 else Task.END
    if task is Task.AGGREGATED_MODEL_VALIDATION:
        return Task.TRAIN
    if task is Task.TRAIN:
        return Task.LOCAL_MODEL_VALIDATION
    if task is Task.LOCAL_MODEL_VALIDATION:
        return Task.JOIN
    if task is Task.JOIN:
        return Task.AGGREGATED_MODEL_VALIDATION if completed_rounds < rounds else Task.END
    raise ValueError("no task follows End")


@dataclass(frozen=True)
class WorkflowSpec:
    rounds: int
    local_epochs_per_round: int = 1
    weights: str = "samples"  # "samples" | "uniform"
    parallel: bool = True
    tasks: tuple = TASKS

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs_per_round < 1:
            raise ValueError("rounds must be >= 0 and local epochs >= 1")
        if self.weights not in ("samples", "uniform"):
            raise ValueError(f"unknown weights policy {self.weights!r}")
        if tuple(self.tasks) != TASKS:
            raise ValueError("task sequence is fixed")


@dataclass(frozen=True)
class FederationState:
    round: int
    global_denoiser: ParamStore
    global_regressor: ParamStore
    history: tuple = ()
    trace: tuple = (Task.START,)


class CollaboratorHandle(Protocol):
    collaborator_id: str

    def run_tasks(self, denoiser: ParamStore, regressor: ParamStore, round_index: int) -> ModelUpdate: ...


class Collaborator:
    """In-process collaborator wrapping a local training :class:`Site`."""

    def __init__(self, collaborator_id: str, site: Site, local_epochs: int = 1):
        self.collaborator_id = collaborator_id
        self._site = site
        self._local_epochs = local_epochs
        self.tasks_run: list[Task] = []

    def run_tasks(self, denoiser: ParamStore, regressor: ParamStore, round_index: int) -> ModelUpdate:
        site = self._site
        first_epoch = round_index * self._local_epochs
        self.tasks_run.append(Task.AGGREGATED_MODEL_VALIDATION)
        agg = site.validate(denoiser, regressor, first_epoch)
        self.tasks_run.append(Task.TRAIN)
        train_metrics: dict[str, float] = {}
        for e in range(self._local_epochs):
            denoiser, regressor, train_metrics = site.train_epoch(denoiser, regressor, first_epoch + e)
        self.tasks_run.append(Task.LOCAL_MODEL_VALIDATION)
        local = site.validate(denoiser, regressor, first_epoch)
        metrics = dict(train_metrics)
        metrics.update(agg)
        metrics.update({"local_" + k: v for k, v in local.items()})
        return ModelUpdate(self.collaborator_id, denoiser, regressor, site.train_count, metrics)


def _collect(spec: WorkflowSpec, collaborators: Sequence[CollaboratorHandle],
             den: ParamStore, reg: ParamStore, round_index: int) -> list[ModelUpdate]:
    def call(c):
        try:
            return c.run_tasks(den, reg, round_index)
        except Exception as exc:
            raise CollaboratorFailure(c.collaborator_id, exc) from exc

    if spec.parallel and len(collaborators) > 1:
        with ThreadPoolExecutor(max_workers=len(collaborators)) as pool:
            futures = [pool.submit(call, c) for c in collaborators]
            return [f.result() for f in futures]
    return [call(c) for c in collaborators]


def run_round(state: FederationState, spec: WorkflowSpec,
              collaborators: Sequence[CollaboratorHandle]) -> FederationState:
    """One federation round; on any collaborator failure the input state is returned untouched."""
    if state.round >= spec.rounds:
        raise ValueError(f"workflow already completed {spec.rounds} rounds")
    if not collaborators:
        raise ValueError("no collaborators")
    updates = _collect(spec, collaborators, state.global_denoiser, state.global_regressor, state.round)
    ids = [u.collaborator_id for u in updates]
    weights = [u.train_sample_count if spec.weights == "samples" else 1.0 for u in updates]
    den = fedavg([u.denoiser_params for u in updates], weights, ids)
    reg = fedavg([u.regressor_params for u in updates], weights, ids)
    aggregated = aggregate_metrics([u.metrics for u in updates], weights, ids)
    entry = {
        "round": state.round,
        "aggregated": aggregated,
        "collaborators": {u.collaborator_id: dict(u.metrics) for u in sorted(updates, key=lambda u: u.collaborator_id)},
    }
    done = state.round + 1
    trace = state.trace + (Task.AGGREGATED_MODEL_VALIDATION, Task.TRAIN, Task.LOCAL_MODEL_VALIDATION, Task.JOIN)
    if next_task(Task.JOIN, done, spec.rounds) is Task.END:
        trace = trace + (Task.END,)
    log.info("round %d joined: %s", state.round, aggregated)
    return replace(state, round=done, global_denoiser=den, global_regressor=reg,
                   history=state.history + (entry,), trace=trace)


def run_workflow(spec: WorkflowSpec, denoiser: ParamStore, regressor: ParamStore,
                 collaborators: Sequence[CollaboratorHandle],
                 on_round: Callable[[FederationState], None] | None = None) -> FederationState:
    """Start, ``spec.rounds`` rounds, End. ``on_round`` sees the state after each join."""
    state = FederationState(0, denoiser, regressor, (), (Task.START,))
    if next_task(Task.START, 0, spec.rounds) is Task.END:
        return replace(state, trace=state.trace + (Task.END,))
    while state.round < spec.rounds:
        state = run_round(state, spec, collaborators)
        if on_round is not None:
            on_round(state)
    return state
