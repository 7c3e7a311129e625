"""
Running grids of training runs, and writing their artifacts.

Layout of an output directory::

    config.toml          effective configuration
    MANIFEST.json        status of every run
    summary.csv          mean metrics, in percent, per method and setting
    cells/<cell_id>/     accuracy.csv, heatmap.csv, steps.jsonl, buffer.csv, checkpoint.bin,
                         result.json
    theory/*.csv         theory tables, if computed
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from surelab.acceptance import TheorySuite
from surelab.config import Cell, ExperimentConfig, config_hash, run_config_hash
from surelab.errors import ConfigError
from surelab.io.checkpoint import load_checkpoint, save_checkpoint
from surelab.io.configfile import ConfigFile
from surelab.io.steplog import StepLog
from surelab.io.tables import (
    format_percent,
    read_csv,
    write_accuracy_csv,
    write_buffer_csv,
    write_csv,
    write_heatmap_csv,
)
from surelab.metrics import MetricSummary, summarize
from surelab.paths import AnyPath, ensure_dir
from surelab.tasks import TaskStream, generate_stream
from surelab.trainer import RunState, run_task_sequence

_LOG = logging.getLogger(__name__)

CONFIG_NAME = "config.toml"
MANIFEST_NAME = "MANIFEST.json"
SUMMARY_NAME = "summary.csv"
CELLS_DIR = "cells"
THEORY_DIR = "theory"

COMPLETE = "complete"
FAILED = "failed"
PENDING = "pending"


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class CellResult:
    cell: Cell
    status: str
    metrics: MetricSummary | None = None
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.status == COMPLETE

    def to_json(self) -> dict[str, Any]:
        schedule = self.cell.run.schedule
        metrics = None
        if self.metrics is not None:
            metrics = {
                "final_performance": self.metrics.final_performance,
                "average_performance": self.metrics.average_performance,
                "forgetting": self.metrics.forgetting,
                "average_forgetting": self.metrics.average_forgetting,
                "backward_transfer": self.metrics.backward_transfer,
            }
        return {
            "cell_id": self.cell.cell_id,
            "method": self.cell.method.value,
            "order": self.cell.order,
            "task_order": list(self.cell.run.task_order),
            "seed": self.cell.seed,
            "beta": schedule.beta,
            "buffer": _buffer_label(self.cell),
            "replay_interval": schedule.replay_interval,
            "status": self.status,
            "metrics": metrics,
            "error": self.error,
        }


@dataclass(frozen=True)
class ExperimentResult:
    output_dir: Path
    cells: tuple[CellResult, ...]

    @property
    def complete(self) -> bool:
        return all(c.complete for c in self.cells)


def _buffer_label(cell: Cell) -> str:
    run = cell.run
    if cell.method.policy is None:
        return "-"
    if run.buffer_size is not None:
        return str(run.buffer_size)
    return f"{run.buffer_fraction:g}"


def _task_names(cell: Cell) -> list[str]:
    return [f"task{t}" for t in cell.run.task_order]


def _load_result(cell: Cell, path: Path) -> CellResult | None:
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("status") != COMPLETE or data.get("metrics") is None:
        return None
    m = data["metrics"]
    metrics = MetricSummary(
        m["final_performance"],
        m["average_performance"],
        m["forgetting"],
        m["average_forgetting"],
        m["backward_transfer"],
    )
    return CellResult(cell, COMPLETE, metrics)


def _train_cell(
    cell: Cell, out: Path, stream: TaskStream, resume: bool, checkpoint: bool
) -> CellResult:
    checkpoint_path = out / "checkpoint.bin"
    log_path = out / "steps.jsonl"
    run_hash = run_config_hash(cell.run)

    state = None
    if resume and checkpoint_path.exists():
        state = load_checkpoint(checkpoint_path, cell.run, run_hash)
        _LOG.info("Resuming cell %s after %d tasks.", cell.cell_id, state.position)
    # Drop any log records written after the state we start from.
    with StepLog.open(log_path, offset=0 if state is None else state.log_offset):
        pass

    def _on_boundary(s: RunState) -> None:
        with StepLog.open(log_path, offset=s.log_offset) as log:
            log.extend(s.log)
        s.log_offset = s.log_count
        s.log = []
        if checkpoint:
            save_checkpoint(s, checkpoint_path, run_hash)

    final, matrix = run_task_sequence(cell.run, stream, state, on_boundary=_on_boundary)
    names = _task_names(cell)
    write_accuracy_csv(out / "accuracy.csv", matrix, names)
    write_heatmap_csv(out / "heatmap.csv", matrix, names)
    if final.memory is not None:
        write_buffer_csv(out / "buffer.csv", final.memory)
    return CellResult(cell, COMPLETE, summarize(matrix))


def run_cell(
    cell: Cell,
    cell_dir: AnyPath,
    stream: TaskStream,
    resume: bool = False,
    checkpoint: bool = True,
) -> CellResult:
    """
    Run one cell of a grid, writing its artifacts to `cell_dir`.

    With `resume`, a finished cell is not rerun, and an unfinished one continues from its last
    task-boundary checkpoint. Any exception marks the cell as failed.
    """
    out = ensure_dir(cell_dir)
    result_path = out / "result.json"

    try:
        if resume and result_path.exists():
            previous = _load_result(cell, result_path)
            if previous is not None:
                _LOG.info("Cell %s is already complete.", cell.cell_id)
                return previous
        result = _train_cell(cell, out, stream, resume, checkpoint)
    except Exception as e:  # pylint: disable=broad-exception-caught
        _LOG.exception("Cell %s failed.", cell.cell_id)
        result = CellResult(cell, FAILED, error=f"{type(e).__name__}: {e}")
    _write_json(result_path, result.to_json())
    return result


SUMMARY_HEADER = [
    "method",
    "beta",
    "buffer",
    "replay_interval",
    "runs",
    "final_performance",
    "average_performance",
    "forgetting",
    "average_forgetting",
    "backward_transfer",
]


def summary_rows(results: Sequence[CellResult]) -> list[list[str]]:
    """Mean metrics in percent over the orders and seeds of every setting, in grid order."""
    groups: dict[tuple[str, str, str, str], list[MetricSummary]] = {}
    for r in results:
        schedule = r.cell.run.schedule
        key = (
            r.cell.method.value,
            f"{schedule.beta:g}",
            _buffer_label(r.cell),
            str(schedule.replay_interval),
        )
        group = groups.setdefault(key, [])
        if r.metrics is not None:
            group.append(r.metrics)
    rows = []
    for key, metrics in groups.items():
        means = [
            float(np.mean([getattr(m, name) for m in metrics])) if metrics else math.nan
            for name in SUMMARY_HEADER[5:]
        ]
        rows.append([*key, str(len(metrics)), *(format_percent(v) for v in means)])
    return rows


def write_manifest(
    output_dir: Path,
    config: ExperimentConfig,
    results: dict[str, str],
    elapsed_seconds: float | None = None,
) -> Path:
    """
    Write the status of every cell to `MANIFEST.json`.

    :param elapsed_seconds: Wall time of the last `run` or `resume`, once it has finished.
    """
    path = output_dir / MANIFEST_NAME
    _write_json(
        path,
        {
            "config_hash": config_hash(config),
            "complete": all(status == COMPLETE for status in results.values()),
            "cells": results,
            "elapsed_seconds": elapsed_seconds,
        },
    )
    return path


def read_manifest(output_dir: AnyPath) -> dict[str, Any]:
    path = Path(output_dir) / MANIFEST_NAME
    result: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    return result


async def run_experiment_async(
    config: ExperimentConfig,
    output_dir: AnyPath | None = None,
    resume: bool = False,
) -> ExperimentResult:
    """
    Run every cell of the grid of `config`, at most `config.run.workers` at a time.

    Failed cells do not stop the others. The manifest records which cells completed.
    """
    start = time.perf_counter()
    out = ensure_dir(output_dir if output_dir is not None else config.run.output_dir)
    cells = config.cells()
    config_path = out / CONFIG_NAME
    if resume and config_path.exists():
        recorded = ConfigFile(config_path).get_config()
        if config_hash(recorded) != config_hash(config):
            raise ConfigError(f"{config_path} records a different configuration.")
    config_file = ConfigFile(config_path)
    config_file.set_config(config)
    config_file.close()

    statuses = {c.cell_id: PENDING for c in cells}
    write_manifest(out, config, statuses)
    stream = generate_stream(config.stream.spec, config.stream.n_tasks, config.stream.seed)
    semaphore = asyncio.Semaphore(config.run.workers)

    async def _run(cell: Cell) -> CellResult:
        async with semaphore:
            return await asyncio.to_thread(
                run_cell,
                cell,
                out / CELLS_DIR / cell.cell_id,
                stream,
                resume,
                config.run.checkpoint,
            )

    results = await asyncio.gather(*[_run(c) for c in cells])

    for r in results:
        statuses[r.cell.cell_id] = r.status
    elapsed = time.perf_counter() - start
    write_manifest(out, config, statuses, elapsed)
    write_csv(out / SUMMARY_NAME, SUMMARY_HEADER, summary_rows(results))
    result = ExperimentResult(out, tuple(results))
    _LOG.info("Ran %d cells in %.1f s.", len(results), elapsed)
    if not result.complete:
        _LOG.error("%d of %d runs failed.", sum(not r.complete for r in results), len(results))
    return result


def run_experiment(
    config: ExperimentConfig, output_dir: AnyPath | None = None
) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config, output_dir))


def resume_experiment(output_dir: AnyPath) -> ExperimentResult:
    """Continue the experiment recorded in `output_dir`."""
    config_path = Path(output_dir) / CONFIG_NAME
    if not config_path.exists():
        raise ConfigError(f"No experiment to resume: {config_path} does not exist.")
    config = ConfigFile(config_path).get_config()
    return asyncio.run(run_experiment_async(config, output_dir, resume=True))


def read_summary(output_dir: AnyPath) -> list[dict[str, str]]:
    header, rows = read_csv(Path(output_dir) / SUMMARY_NAME)
    return [dict(zip(header, row)) for row in rows]


def _write_rows(path: Path, rows: Sequence[Any]) -> Path:
    assert rows, f"No rows to write to {path}."
    names = [f.name for f in fields(rows[0])]
    return write_csv(path, names, [[getattr(r, n) for n in names] for r in rows])


def write_theory_tables(output_dir: AnyPath, suite: TheorySuite) -> list[Path]:
    """Write the tables of a theory suite to `<output_dir>/theory/`."""
    out = ensure_dir(Path(output_dir) / THEORY_DIR)
    mmd_rows = [
        [name, e.value, e.bandwidth, e.n_p, e.n_q]
        for name, e in [("null", suite.mmd_null), ("two_point", suite.mmd_two_point)]
    ]
    return [
        write_csv(out / "mmd.csv", ["case", "value", "bandwidth", "n_p", "n_q"], mmd_rows),
        _write_rows(out / "ema_quadratic.csv", suite.ema_rows),
        _write_rows(out / "ema_noise.csv", suite.noise_rows),
        _write_rows(out / "complementarity.csv", suite.complementarity_rows),
        _write_rows(out / "correlation.csv", [suite.correlation]),
    ]
