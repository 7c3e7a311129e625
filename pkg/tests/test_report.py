import math
from pathlib import Path

import pytest

from surelab import emit_report, run_experiment
from surelab.experiment import read_summary
from surelab.io.tables import read_csv
from surelab.report import mark_best, write_summary_table
from tests.utils import fake_experiment_config


@pytest.mark.parametrize(
    "values,expected",
    [
        ([50.0, 70.0, math.nan, 60.0], ["50.00", "70.00**", "", "60.00*"]),
        ([1.0, 1.0, 0.5], ["1.00**", "1.00*", "0.50"]),
        ([12.5], ["12.50**"]),
        ([math.nan, math.nan], ["", ""]),
        ([], []),
    ],
)
def test_mark_best(values: list[float], expected: list[str]) -> None:
    assert expected == mark_best(values)


def test_write_summary_table(tmp_path: Path) -> None:
    means = {
        "seqft": {"order1": 20.0, "order2": 30.0},
        "slow_surprise": {"order1": 60.0, "order2": 50.0},
        "surprise_replay": {"order1": 55.0},
    }

    path = write_summary_table(tmp_path / "table.csv", ["order1", "order2"], means)

    assert (
        "method,order1,order2,mean\n"
        "seqft,20.00,30.00*,25.00\n"
        "slow_surprise,60.00**,50.00**,55.00**\n"
        "surprise_replay,55.00*,,55.00*\n"
    ) == path.read_text()


def test_emit_report(tmp_path: Path) -> None:
    config = fake_experiment_config(methods=["seqft", "slow_surprise"], orders=["order1", "order2"])
    run_experiment(config, tmp_path)
    theory = tmp_path / "theory"
    theory.mkdir()
    (theory / "mmd.csv").write_text("case,value\nnull,0.0\n")

    result = emit_report(tmp_path, check=True)

    assert [] == result.missing
    assert [] == result.checks
    assert result.checks_passed
    report = tmp_path / "report"
    header, rows = read_csv(report / "summary_table.csv")
    assert ["method", "order1", "order2", "mean"] == header
    assert ["seqft", "slow_surprise"] == [r[0] for r in rows]
    summary = {r["method"]: r["final_performance"] for r in read_summary(tmp_path)}
    for row in rows:
        assert summary[row[0]] == row[3].rstrip("*")
    assert sorted(f"{c.cell_id}.csv" for c in config.cells()) == sorted(
        p.name for p in (report / "heatmaps").iterdir()
    )
    assert "case,value\nnull,0.0\n" == (report / "theory" / "mmd.csv").read_text()
    assert 4 + 1 + 1 == len(result.paths)


def test_emit_report__partial(tmp_path: Path) -> None:
    config = fake_experiment_config(methods=["seqft", "slow_surprise"])
    result = run_experiment(config, tmp_path)
    broken = tmp_path / "cells" / result.cells[1].cell.cell_id
    (broken / "accuracy.csv").unlink()
    (broken / "heatmap.csv").unlink()

    report = emit_report(tmp_path)

    assert [str(broken / "accuracy.csv"), str(broken / "heatmap.csv")] == report.missing
    _, rows = read_csv(tmp_path / "report" / "summary_table.csv")
    assert ["seqft"] == [r[0] for r in rows]


def test_emit_report__empty(tmp_path: Path) -> None:
    result = emit_report(tmp_path, check=True)

    assert [str(tmp_path / "cells"), str(tmp_path / "summary.csv")] == result.missing
    assert [] == result.paths
    assert (tmp_path / "report").is_dir()
