"""Comma-separated tables with a header row."""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

from surelab.buffer import ReplayMemory
from surelab.metrics import AccuracyMatrix
from surelab.paths import AnyPath


def format_value(value: Any) -> str:
    """Floats use their shortest round-tripping form. `None` and NaN are empty cells."""
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def format_percent(value: float) -> str:
    return "" if math.isnan(value) else f"{100.0 * value:.2f}"


def write_csv(path: AnyPath, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    result = Path(path)
    with open(result, "wt", encoding="utf-8", newline="") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            assert len(row) == len(header), f"Row does not match header {header}. Found: {row}"
            writer.writerow([v if isinstance(v, str) else format_value(v) for v in row])
    return result


def read_csv(path: AnyPath) -> tuple[list[str], list[list[str]]]:
    with open(path, "rt", encoding="utf-8", newline="") as fp:
        rows = list(csv.reader(fp))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def write_accuracy_csv(
    path: AnyPath, matrix: AccuracyMatrix, task_names: Sequence[str]
) -> Path:
    """One row per training stage, one column per task of the training order."""
    assert len(task_names) == matrix.n_tasks, f"Need one name per task. Found: {task_names}"
    rows = [
        [f"after_{task_names[i]}"] + [format_value(float(v)) for v in matrix.values[i]]
        for i in range(matrix.values.shape[0])
    ]
    return write_csv(path, ["stage", *task_names], rows)


def read_accuracy_csv(path: AnyPath) -> AccuracyMatrix:
    _, rows = read_csv(path)
    return AccuracyMatrix.from_rows(
        [[float(v) if v else math.nan for v in row[1:]] for row in rows], len(rows)
    )


def write_heatmap_csv(
    path: AnyPath, matrix: AccuracyMatrix, task_names: Sequence[str]
) -> Path:
    """Long format: `(train_stage, test_task, accuracy)`, one row per populated entry."""
    rows = []
    for i in range(matrix.values.shape[0]):
        for j in range(matrix.n_tasks):
            value = float(matrix.values[i, j])
            if not math.isnan(value):
                rows.append([task_names[i], task_names[j], format_value(value)])
    return write_csv(path, ["train_stage", "test_task", "accuracy"], rows)


def write_buffer_csv(path: AnyPath, memory: ReplayMemory) -> Path:
    return write_csv(path, ["task_id", "score", "tokens"], memory.export_rows())
