"""
Summary tables from the artifacts of an experiment directory.

Everything is recomputed from the raw accuracy matrices of the cells, so a report can be emitted
for partial runs too. Artifacts that are missing are listed, not fatal.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from surelab.acceptance import CheckResult, summary_checks
from surelab.experiment import CELLS_DIR, SUMMARY_NAME, THEORY_DIR, read_summary
from surelab.io.tables import read_accuracy_csv, write_csv
from surelab.metrics import final_performance
from surelab.paths import AnyPath, ensure_dir

_LOG = logging.getLogger(__name__)

REPORT_DIR = "report"
SUMMARY_TABLE_NAME = "summary_table.csv"
HEATMAPS_DIR = "heatmaps"

BEST_MARKER = "**"
SECOND_MARKER = "*"


@dataclass
class ReportResult:
    paths: list[Path] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def checks_passed(self) -> bool:
        return all(c.passed for c in self.checks)


def mark_best(values: Sequence[float]) -> list[str]:
    """
    Format percentages, marking the highest value with `**` and the second highest with `*`.

    Ties are broken by position. NaN is an empty cell and never marked.
    """
    order = sorted(
        (i for i, v in enumerate(values) if not math.isnan(v)), key=lambda i: -values[i]
    )
    result = ["" if math.isnan(v) else f"{v:.2f}" for v in values]
    for marker, i in zip([BEST_MARKER, SECOND_MARKER], order):
        result[i] += marker
    return result


def final_performance_table(
    cells_dir: Path, missing: list[str]
) -> tuple[list[str], dict[str, dict[str, float]]]:
    """Mean final performance in percent per method and order, over every other grid axis."""
    groups: dict[str, dict[str, list[float]]] = {}
    orders: list[str] = []
    for cell_dir in sorted(p for p in cells_dir.iterdir() if p.is_dir()):
        result_path = cell_dir / "result.json"
        accuracy_path = cell_dir / "accuracy.csv"
        if not result_path.exists() or not accuracy_path.exists():
            missing.append(str(accuracy_path if result_path.exists() else result_path))
            continue
        data = json.loads(result_path.read_text(encoding="utf-8"))
        method, order = data["method"], data["order"]
        if order not in orders:
            orders.append(order)
        value = 100.0 * final_performance(read_accuracy_csv(accuracy_path))
        groups.setdefault(method, {}).setdefault(order, []).append(value)
    means = {
        method: {order: float(np.mean(values)) for order, values in by_order.items()}
        for method, by_order in groups.items()
    }
    return orders, means


def write_summary_table(
    path: AnyPath, orders: Sequence[str], means: dict[str, dict[str, float]]
) -> Path:
    """
    One row per method, one column per order and a last column with the row mean. In every column
    the best method is marked `**` and the second best `*`.
    """
    methods = list(means)
    columns = []
    for order in orders:
        columns.append([means[m].get(order, math.nan) for m in methods])
    columns.append(
        [float(np.mean([means[m][o] for o in orders if o in means[m]])) for m in methods]
    )
    formatted = [mark_best(column) for column in columns]
    rows = [[m, *(column[i] for column in formatted)] for i, m in enumerate(methods)]
    return write_csv(path, ["method", *orders, "mean"], rows)


def emit_report(output_dir: AnyPath, check: bool = False) -> ReportResult:
    """
    Write `<output_dir>/report/`: the method × order summary table, one heatmap per run and copies
    of the theory tables.

    :param check: Also run the directional checks on `summary.csv`.
    """
    root = Path(output_dir)
    out = ensure_dir(root / REPORT_DIR)
    result = ReportResult()

    cells_dir = root / CELLS_DIR
    if cells_dir.is_dir():
        orders, means = final_performance_table(cells_dir, result.missing)
        if means:
            result.paths.append(write_summary_table(out / SUMMARY_TABLE_NAME, orders, means))
        heatmaps = ensure_dir(out / HEATMAPS_DIR)
        for cell_dir in sorted(p for p in cells_dir.iterdir() if p.is_dir()):
            source = cell_dir / "heatmap.csv"
            if source.exists():
                result.paths.append(
                    Path(shutil.copyfile(source, heatmaps / f"{cell_dir.name}.csv"))
                )
            else:
                result.missing.append(str(source))
    else:
        result.missing.append(str(cells_dir))

    theory_dir = root / THEORY_DIR
    if theory_dir.is_dir():
        theory_out = ensure_dir(out / THEORY_DIR)
        for table in sorted(theory_dir.glob("*.csv")):
            result.paths.append(Path(shutil.copyfile(table, theory_out / table.name)))

    if check:
        if (root / SUMMARY_NAME).exists():
            result.checks = summary_checks(read_summary(root))
        else:
            result.missing.append(str(root / SUMMARY_NAME))

    for path in result.missing:
        _LOG.warning("Missing artifact: %s", path)
    return result
