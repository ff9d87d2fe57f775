"""Momentum adaptive loss weighting between an ID loss and a metric loss.

Every step records the *weighted* losses. At iterations where
``iteration % k == 0`` the population standard deviations of both buffers
are compared, the buffers are emptied, and if the ID spread is strictly the
larger one the ID weight moves towards ``metric_std / id_std``:

* ``literal``: ``lambda_id = alpha * lambda_id + ratio``
* ``ema``:     ``lambda_id = alpha * lambda_id + (1 - alpha) * ratio``

The metric weight stays at 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Literal

import numpy as np

Mode = Literal["literal", "ema"]
Record = Literal["weighted", "raw"]


@dataclass(frozen=True)
class MalwUpdate:
    update_index: int
    iteration: int
    lambda_id: float
    lambda_metric: float
    id_std: float
    metric_std: float
    changed: bool

    def csv_row(self) -> str:
        return f"{self.update_index},{self.lambda_id!r},{self.lambda_metric!r},{self.id_std!r},{self.metric_std!r}"


CSV_HEADER = "update_index,lambda_id,lambda_metric,id_std,metric_std"


@dataclass(frozen=True)
class MalwState:
    k: int = 500
    alpha: float = 0.9
    mode: Mode = "literal"
    record: Record = "weighted"
    lambda_id: float = 1.0
    lambda_metric: float = 1.0
    buffer_id: tuple[float, ...] = ()
    buffer_metric: tuple[float, ...] = ()
    iteration: int = 0
    updates: int = 0
    last_update: MalwUpdate | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.mode not in ("literal", "ema"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.record not in ("weighted", "raw"):
            raise ValueError(f"unknown record setting {self.record!r}")
        if not (self.lambda_id > 0 and self.lambda_metric > 0):
            raise ValueError("loss weights must be positive")


def malw_init(k: int = 500, alpha: float = 0.9, mode: Mode = "literal", record: Record = "weighted") -> MalwState:
    """Fresh scheduler with 1:1 weights and empty buffers.

    ``record="raw"`` stores unweighted losses instead, which removes the
    feedback of the current weight on the recorded spread.
    """
    return MalwState(k=k, alpha=alpha, mode=mode, record=record)


def _pstd(values: tuple[float, ...]) -> float:
    return float(np.std(values)) if values else 0.0


def malw_step(state: MalwState, raw_id_loss: float, raw_metric_loss: float) -> tuple[float, MalwState]:
    """Weight the two losses, record them, and update on schedule.

    Returns the weighted total and the successor state.
    """
    if not (math.isfinite(raw_id_loss) and math.isfinite(raw_metric_loss)):
        raise ValueError(f"non-finite loss at iteration {state.iteration}: "
                         f"id={raw_id_loss!r}, metric={raw_metric_loss!r}")
    if raw_id_loss < 0 or raw_metric_loss < 0:
        raise ValueError("losses must be non-negative")
    w_id = state.lambda_id * raw_id_loss
    w_metric = state.lambda_metric * raw_metric_loss
    total = w_id + w_metric
    if state.record == "weighted":
        buf_id = state.buffer_id + (w_id,)
        buf_metric = state.buffer_metric + (w_metric,)
    else:
        buf_id = state.buffer_id + (float(raw_id_loss),)
        buf_metric = state.buffer_metric + (float(raw_metric_loss),)

    i = state.iteration
    if i % state.k != 0:
        return total, replace(state, buffer_id=buf_id, buffer_metric=buf_metric, iteration=i + 1)

    id_std, metric_std = _pstd(buf_id), _pstd(buf_metric)
    lam = state.lambda_id
    changed = id_std > metric_std
    if changed:
        ratio = 1.0 - (id_std - metric_std) / id_std
        if state.mode == "literal":
            lam = state.alpha * lam + ratio
        else:
            lam = state.alpha * lam + (1.0 - state.alpha) * ratio
    update = MalwUpdate(state.updates, i, lam, state.lambda_metric, id_std, metric_std, changed)
    return total, replace(
        state, lambda_id=lam, buffer_id=(), buffer_metric=(), iteration=i + 1,
        updates=state.updates + 1, last_update=update,
    )


def malw_trajectory(loss_stream: Iterable[tuple[float, float]], state: MalwState) -> list[MalwUpdate]:
    """Replay ``malw_step`` over ``(id_loss, metric_loss)`` pairs; one snapshot per update point."""
    snapshots = []
    for raw_id, raw_metric in loss_stream:
        _, new_state = malw_step(state, raw_id, raw_metric)
        if new_state.updates != state.updates:
            snapshots.append(new_state.last_update)
        state = new_state
    return snapshots


def trajectory_csv(updates: Iterable[MalwUpdate]) -> str:
    return "\n".join([CSV_HEADER, *(u.csv_row() for u in updates)]) + "\n"
