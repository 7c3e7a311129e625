import json
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from surelab import (
    ConfigError,
    ConfigFile,
    NonFiniteError,
    resume_experiment,
    run_experiment,
    run_experiment_async,
    run_task_sequence,
    save_checkpoint,
)
from surelab.acceptance import TheorySuite, check_method_ordering
from surelab.config import run_config_hash
from surelab.experiment import read_manifest, read_summary, write_theory_tables
from surelab.metrics import to_percent
from surelab.tasks import generate_stream
from surelab.theory import ComplementarityRow, CorrelationReport, EmaRow, MmdEstimate, NoiseRow
from surelab.trainer import RunState
from tests.utils import fake_experiment_config


class _Interrupted(Exception):
    pass


CELL_FILES = ["accuracy.csv", "checkpoint.bin", "heatmap.csv", "result.json", "steps.jsonl"]


async def test_run_experiment_async(tmp_path: Path) -> None:
    config = fake_experiment_config(methods=["seqft", "slow_surprise"], orders=["order1", "order2"])

    result = await run_experiment_async(config, tmp_path)

    assert result.complete
    assert tmp_path == result.output_dir
    assert 4 == len(result.cells)
    manifest = read_manifest(tmp_path)
    assert manifest["complete"]
    assert {c.cell.cell_id: "complete" for c in result.cells} == manifest["cells"]
    assert manifest["elapsed_seconds"] > 0.0
    assert config == ConfigFile(tmp_path / "config.toml").get_config()
    for cell_result in result.cells:
        cell_dir = tmp_path / "cells" / cell_result.cell.cell_id
        expected = CELL_FILES + (["buffer.csv"] if cell_result.cell.method.policy else [])
        assert sorted(expected) == sorted(p.name for p in cell_dir.iterdir())
        assert 8 == len((cell_dir / "steps.jsonl").read_text().splitlines())
        data = json.loads((cell_dir / "result.json").read_text())
        assert "complete" == data["status"]
        assert cell_result.cell.order == data["order"]

    rows = read_summary(tmp_path)
    assert ["seqft", "slow_surprise"] == [r["method"] for r in rows]
    assert ["2", "2"] == [r["runs"] for r in rows]
    assert ["-", "6"] == [r["buffer"] for r in rows]
    assert all(r["final_performance"] for r in rows)


def test_run_experiment__deterministic(tmp_path: Path) -> None:
    config = fake_experiment_config(methods=["reservoir_replay", "slow_random"])

    a = run_experiment(config, tmp_path / "a")
    b = run_experiment(config, tmp_path / "b")

    assert (tmp_path / "a" / "summary.csv").read_bytes() == (
        tmp_path / "b" / "summary.csv"
    ).read_bytes()
    for cell in a.cells:
        for name in ["accuracy.csv", "steps.jsonl", "buffer.csv", "checkpoint.bin"]:
            path_a = a.output_dir / "cells" / cell.cell.cell_id / name
            path_b = b.output_dir / "cells" / cell.cell.cell_id / name
            assert path_a.read_bytes() == path_b.read_bytes()


def test_resume_experiment__complete(tmp_path: Path) -> None:
    config = fake_experiment_config(methods=["seqft", "surprise_replay"])
    run_experiment(config, tmp_path)
    summary = (tmp_path / "summary.csv").read_bytes()
    steps = sorted((tmp_path / "cells").glob("*/steps.jsonl"))
    before = [p.read_bytes() for p in steps]

    result = resume_experiment(tmp_path)

    assert result.complete
    assert summary == (tmp_path / "summary.csv").read_bytes()
    assert before == [p.read_bytes() for p in steps]


def test_resume_experiment__from_checkpoint(tmp_path: Path) -> None:
    config = fake_experiment_config()
    run_experiment(config, tmp_path)
    (cell,) = config.cells()
    cell_dir = tmp_path / "cells" / cell.cell_id
    expected = {name: (cell_dir / name).read_bytes() for name in CELL_FILES + ["buffer.csv"]}
    summary = (tmp_path / "summary.csv").read_bytes()

    # Roll the cell back to its first task boundary.
    stream = generate_stream(config.stream.spec, config.stream.n_tasks, config.stream.seed)

    def interrupt(state: RunState) -> None:
        save_checkpoint(state, cell_dir / "checkpoint.bin", run_config_hash(cell.run))
        raise _Interrupted()

    with pytest.raises(_Interrupted):
        run_task_sequence(cell.run, stream, on_boundary=interrupt)
    for name in ["result.json", "accuracy.csv", "heatmap.csv", "buffer.csv"]:
        (cell_dir / name).unlink()
    with (cell_dir / "steps.jsonl").open("wt", encoding="utf-8") as fp:
        fp.write("".join(expected["steps.jsonl"].decode().splitlines(keepends=True)[:4]))
        fp.write('{"loss":1.0,"mixed":false,"rejected":false,"replayed":0,"step":5,"task":1}\n')

    result = resume_experiment(tmp_path)

    assert result.complete
    assert summary == (tmp_path / "summary.csv").read_bytes()
    for name, data in expected.items():
        assert data == (cell_dir / name).read_bytes(), name


@pytest.mark.parametrize(
    "error",
    [
        NonFiniteError("loss", "diverged"),
        KeyError("blocks.0.q"),
        AssertionError("Test split 0 is empty."),
        OSError("disk full"),
    ],
)
def test_run_experiment__failed_cell(
    tmp_path: Path, monkeypatch: pytest.MonkeyPatch, error: Exception
) -> None:
    config = fake_experiment_config(methods=["seqft", "slow_surprise"])

    def _run_task_sequence(run: Any, *args: Any, **kwargs: Any) -> Any:
        if run.schedule.method.value == "seqft":
            raise error
        return run_task_sequence(run, *args, **kwargs)

    monkeypatch.setattr("surelab.experiment.run_task_sequence", _run_task_sequence)

    result = run_experiment(config, tmp_path)

    assert not result.complete
    assert ["failed", "complete"] == [c.status for c in result.cells]
    assert not read_manifest(tmp_path)["complete"]
    failed_dir = tmp_path / "cells" / result.cells[0].cell.cell_id
    data = json.loads((failed_dir / "result.json").read_text())
    assert data["error"].startswith(f"{type(error).__name__}:")
    assert data["metrics"] is None
    seqft, slow = read_summary(tmp_path)
    assert "0" == seqft["runs"]
    assert "" == seqft["final_performance"]
    assert "1" == slow["runs"]


async def test_run_experiment_async__resume_other_config(tmp_path: Path) -> None:
    await run_experiment_async(fake_experiment_config(), tmp_path)

    with pytest.raises(ConfigError):
        await run_experiment_async(fake_experiment_config(seeds=[1]), tmp_path, resume=True)


def test_resume_experiment__missing(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        resume_experiment(tmp_path)


def test_write_theory_tables(tmp_path: Path) -> None:
    suite = TheorySuite(
        MmdEstimate(0.001, 1.5, 10, 10),
        MmdEstimate(0.75, 1.0, 2, 2),
        [EmaRow(0.9, 1.0, 2.0, 0.125, 0.25, False)],
        [NoiseRow(0.9, 0.05, 0.0625)],
        [ComplementarityRow(0.1, 0.9, 0, 0.5, 0.25)],
        CorrelationReport(0.5, 0.25, 0.75, 30),
    )

    paths = write_theory_tables(tmp_path, suite)

    assert [
        "mmd.csv",
        "ema_quadratic.csv",
        "ema_noise.csv",
        "complementarity.csv",
        "correlation.csv",
    ] == [p.name for p in paths]
    assert all(tmp_path / "theory" == p.parent for p in paths)
    assert (
        "case,value,bandwidth,n_p,n_q\nnull,0.001,1.5,10,10\ntwo_point,0.75,1.0,2,2\n"
        == paths[0].read_text()
    )
    assert (
        "beta,slow_excess_risk,fast_excess_risk,slow_variance,fast_variance,diverged\n"
        "0.9,1.0,2.0,0.125,0.25,False\n"
    ) == paths[1].read_text()
    assert "rho,ci_low,ci_high,n\n0.5,0.25,0.75,30\n" == paths[4].read_text()


@pytest.mark.slow
def test_run_experiment__desk_method_ordering(tmp_path: Path) -> None:
    path = Path(__file__).parents[1] / "configs" / "desk.toml"
    config = ConfigFile(path).get_config(['grid.orders=["order1"]'])
    seeds = range(5)
    assert 20 == len(config.cells())

    result = run_experiment(config, tmp_path)

    assert result.complete
    fp: dict[str, dict[int, float]] = {}
    for cell in result.cells:
        assert cell.metrics is not None
        fp.setdefault(cell.cell.method.value, {})[cell.cell.seed] = to_percent(
            cell.metrics.final_performance
        )
    means = {method: float(np.mean(list(by_seed.values()))) for method, by_seed in fp.items()}
    checks = {r.name: r for r in check_method_ordering(means)}
    assert checks["replay_beats_finetuning"].passed, checks["replay_beats_finetuning"].detail

    spec = config.stream.spec
    one_example = to_percent(1 / (spec.classes_per_task * spec.test_per_class))
    for left, right in [
        ("reservoir_replay", "surprise_replay"),
        ("surprise_replay", "slow_surprise"),
    ]:
        differences = [fp[right][s] - fp[left][s] for s in seeds]
        standard_error = float(np.std(differences, ddof=1) / np.sqrt(len(differences)))
        assert np.mean(differences) >= -(3 * standard_error + one_example), (left, right)
