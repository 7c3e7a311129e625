import numpy as np
import pytest

from surelab import (
    AccuracyMatrix,
    IncompleteMatrixError,
    MetricSummary,
    average_forgetting,
    average_performance,
    backward_transfer,
    final_performance,
    forgetting,
    summarize,
)

NAN = float("nan")

MATRIX = AccuracyMatrix.from_rows([[0.9], [0.6, 0.8], [0.5, 0.7, 0.9]])


def test_accuracy_matrix() -> None:
    assert 3 == MATRIX.n_tasks
    assert 3 == MATRIX.stages_completed
    np.testing.assert_array_equal([0.6, 0.8], MATRIX.seen(1))
    assert np.isnan(MATRIX.values[0, 2])
    assert MATRIX == AccuracyMatrix.from_rows([[0.9], [0.6, 0.8], [0.5, 0.7, 0.9]])
    assert MATRIX != AccuracyMatrix.from_rows([[0.9], [0.6, 0.8], [0.5, 0.7, 0.8]])
    with pytest.raises(ValueError):
        MATRIX.values[0, 0] = 0.0


def test_metrics() -> None:
    assert 0.7 == pytest.approx(final_performance(MATRIX))
    assert 2.3 / 3 == pytest.approx(average_performance(MATRIX))
    assert 2.3 / 3 - 0.7 == pytest.approx(forgetting(MATRIX))
    assert 0.25 == pytest.approx(average_forgetting(MATRIX))
    assert -0.25 == pytest.approx(backward_transfer(MATRIX))


@pytest.mark.parametrize(
    "first,final,expected",
    [
        (0.8474, 0.7692, 3.91),
        (0.7350, 0.7810, -2.30),
    ],
)
def test_forgetting__reported(first: float, final: float, expected: float) -> None:
    matrix = AccuracyMatrix.from_rows([[first], [final, final]])

    summary = summarize(matrix).to_percent()

    assert expected == pytest.approx(summary.forgetting, abs=1e-9)
    assert 100.0 * final == pytest.approx(summary.final_performance)


def test_average_forgetting__uses_best_accuracy() -> None:
    matrix = AccuracyMatrix.from_rows([[0.4], [0.9, 0.5], [0.6, 0.5, 0.7]])

    assert (0.3 + 0.0) / 2 == pytest.approx(average_forgetting(matrix))
    assert (0.2 + 0.0) / 2 == pytest.approx(backward_transfer(matrix))


def test_single_task() -> None:
    matrix = AccuracyMatrix.from_rows([[0.75]])

    assert MetricSummary(0.75, 0.75, 0.0, 0.0, 0.0) == summarize(matrix)


def test_incomplete_matrix() -> None:
    matrix = AccuracyMatrix.from_rows([[0.9], [0.6, 0.8]], n_tasks=3)

    assert 2 == matrix.stages_completed
    assert 0.7 == pytest.approx(float(matrix.seen(1).mean()))
    with pytest.raises(IncompleteMatrixError):
        final_performance(matrix)
    with pytest.raises(IncompleteMatrixError):
        average_performance(matrix)
    with pytest.raises(IncompleteMatrixError):
        summarize(AccuracyMatrix.from_rows([[0.9], [NAN, 0.8]]))
