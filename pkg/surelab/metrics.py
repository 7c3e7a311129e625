"""
Continual-learning metrics over an accuracy matrix.

Entry `(i, j)` of the matrix is the test accuracy on the `j`-th task of the training order, measured
after training on the `i`-th task. Values are fractions in `[0, 1]`; use `to_percent` for reporting.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from surelab.autodiff import FloatArray
from surelab.errors import IncompleteMatrixError


@dataclass(frozen=True, eq=False)
class AccuracyMatrix:
    values: FloatArray
    """`(stages, tasks)`. Missing entries are NaN."""

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        assert values.ndim == 2, f"Accuracy matrix must be 2-dimensional. Found: {values.shape=}"
        finite = values[np.isfinite(values)]
        assert np.all((finite >= 0.0) & (finite <= 1.0)), f"Accuracies must be in [0, 1]. {values}"
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_rows(cls, rows: Sequence[ArrayLike], n_tasks: int | None = None) -> AccuracyMatrix:
        """Stack per-stage rows. Missing stages are filled with NaN up to `n_tasks`."""
        width = n_tasks if n_tasks is not None else len(rows)
        values = np.full((width, width), np.nan)
        for i, row in enumerate(rows):
            r = np.asarray(row, dtype=np.float64)
            values[i, : len(r)] = r
        return cls(values)

    @property
    def n_tasks(self) -> int:
        return int(self.values.shape[1])

    @property
    def stages_completed(self) -> int:
        complete = [bool(np.all(np.isfinite(self.values[i, : i + 1]))) for i in range(self.n_tasks)]
        return complete.index(False) if False in complete else self.n_tasks

    def seen(self, stage: int) -> FloatArray:
        """Accuracies on the tasks trained so far, after training stage `stage`."""
        row: FloatArray = self.values[stage, : stage + 1]
        if not np.all(np.isfinite(row)):
            raise IncompleteMatrixError(f"Stage {stage} is missing seen-task accuracies: {row}")
        return row

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values, equal_nan=True))

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


def final_performance(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after training on the last task."""
    return float(matrix.seen(matrix.n_tasks - 1).mean())


def average_performance(matrix: AccuracyMatrix) -> float:
    """Mean over training stages of the mean accuracy on the tasks seen so far."""
    return float(np.mean([matrix.seen(i).mean() for i in range(matrix.n_tasks)]))


def forgetting(matrix: AccuracyMatrix) -> float:
    """`AP - FP`. Negative values mean earlier tasks improved."""
    return average_performance(matrix) - final_performance(matrix)


def average_forgetting(matrix: AccuracyMatrix) -> float:
    """
    Mean over all but the last task of the drop from the best accuracy ever reached on that task to
    its final accuracy.
    """
    n = matrix.n_tasks
    if n == 1:
        matrix.seen(0)
        return 0.0
    final = matrix.seen(n - 1)
    drops = []
    for j in range(n - 1):
        history = [matrix.seen(i)[j] for i in range(j, n)]
        drops.append(max(history) - final[j])
    return float(np.mean(drops))


def backward_transfer(matrix: AccuracyMatrix) -> float:
    """Mean over all but the last task of final accuracy minus accuracy right after learning it."""
    n = matrix.n_tasks
    if n == 1:
        matrix.seen(0)
        return 0.0
    final = matrix.seen(n - 1)
    return float(np.mean([final[j] - matrix.seen(j)[j] for j in range(n - 1)]))


def to_percent(value: float) -> float:
    return 100.0 * value


@dataclass(frozen=True)
class MetricSummary:
    final_performance: float
    average_performance: float
    forgetting: float
    average_forgetting: float
    backward_transfer: float

    def to_percent(self) -> MetricSummary:
        return MetricSummary(
            to_percent(self.final_performance),
            to_percent(self.average_performance),
            to_percent(self.forgetting),
            to_percent(self.average_forgetting),
            to_percent(self.backward_transfer),
        )


def summarize(matrix: AccuracyMatrix) -> MetricSummary:
    return MetricSummary(
        final_performance(matrix),
        average_performance(matrix),
        forgetting(matrix),
        average_forgetting(matrix),
        backward_transfer(matrix),
    )
