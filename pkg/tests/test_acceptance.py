import logging
import math

import pytest

from surelab import (
    check_gradient,
    init_model,
    run_theory_suite,
    summary_checks,
    theory_checks,
)
from surelab.acceptance import (
    GRAD_CHECK_MODEL,
    CheckResult,
    TheorySuite,
    check_beta_collapse,
    check_complementarity,
    check_method_ordering,
    check_replay_ratio,
    gradient_check_model,
    log_results,
)
from surelab.theory import ComplementarityRow, CorrelationReport, EmaRow, MmdEstimate, NoiseRow


def _summary_row(
    method: str, fp: str, beta: str = "0.995", interval: str = "2"
) -> dict[str, str]:
    return {
        "method": method,
        "beta": beta,
        "buffer": "6",
        "replay_interval": interval,
        "runs": "3",
        "final_performance": fp,
    }


def _surface(values: dict[tuple[float, float], float]) -> list[ComplementarityRow]:
    return [ComplementarityRow(f, b, 0, v, 0.0) for (f, b), v in values.items()]


def _suite(**kwargs: object) -> TheorySuite:
    settings: dict[str, object] = {
        "mmd_null": MmdEstimate(0.002, 1.0, 2000, 2000),
        "mmd_two_point": MmdEstimate(2.0 - 2.0 * math.exp(-0.5), 1.0, 2, 2),
        "ema_rows": [
            EmaRow(0.0, 1.0, 1.0, 0.5, 0.5, False),
            EmaRow(0.9, 1.0, 1.0, 0.4, 0.5, False),
            EmaRow(0.99, 1.0, 1.0, 0.2, 0.5, False),
        ],
        "noise_rows": [NoiseRow(0.9, 1.02 / 19.0, 1.0 / 19.0)],
        "complementarity_rows": _surface(
            {(0.01, 0.0): 4.0, (0.01, 0.9): 3.0, (1.0, 0.0): 3.0, (1.0, 0.9): 1.0}
        ),
        "correlation": CorrelationReport(0.4, 0.1, 0.6, 50),
    }
    settings.update(kwargs)
    return TheorySuite(**settings)  # type: ignore[arg-type]


def test_check_gradient() -> None:
    result = check_gradient()

    assert "gradient" == result.name
    assert result.passed, result.detail


def test_gradient_check_model__every_tensor() -> None:
    report = gradient_check_model()
    model = init_model(GRAD_CHECK_MODEL, 0)

    assert {t.name for t in model.tensors()} == set(report.errors)
    assert any(name.startswith("slow.") for name in report.errors)
    assert report.passed, report.errors


def test_theory_checks() -> None:
    results = theory_checks(_suite())

    assert [
        "mmd_null",
        "mmd_two_point",
        "ema_noise_beta_0.9",
        "ema_variance_decreasing",
        "complementarity",
    ] == [r.name for r in results]
    assert all(r.passed for r in results), results


@pytest.mark.parametrize(
    "kwargs,failed",
    [
        ({"mmd_null": MmdEstimate(-0.02, 1.0, 10, 10)}, "mmd_null"),
        ({"mmd_two_point": MmdEstimate(0.5, 1.0, 2, 2)}, "mmd_two_point"),
        ({"noise_rows": [NoiseRow(0.9, 1.1 / 19.0, 1.0 / 19.0)]}, "ema_noise_beta_0.9"),
        (
            {
                "ema_rows": [
                    EmaRow(0.0, 1.0, 1.0, 0.5, 0.5, False),
                    EmaRow(0.9, 1.0, 1.0, 0.5, 0.5, False),
                ]
            },
            "ema_variance_decreasing",
        ),
    ],
)
def test_theory_checks__failed(kwargs: dict[str, object], failed: str) -> None:
    results = theory_checks(_suite(**kwargs))

    assert [failed] == [r.name for r in results if not r.passed]


@pytest.mark.parametrize(
    "values,passed",
    [
        ({(0.01, 0.0): 4.0, (0.01, 0.9): 3.0, (1.0, 0.0): 3.0, (1.0, 0.9): 1.0}, True),
        # A small memory alone is enough.
        ({(0.01, 0.0): 4.0, (0.01, 0.9): 1.5, (1.0, 0.0): 3.0, (1.0, 0.9): 1.0}, False),
        # Averaging adds nothing on top of the full memory.
        ({(0.01, 0.0): 4.0, (0.01, 0.9): 3.0, (1.0, 0.0): 1.5, (1.0, 0.9): 1.0}, False),
    ],
)
def test_check_complementarity(values: dict[tuple[float, float], float], passed: bool) -> None:
    assert passed == check_complementarity(_surface(values)).passed


def test_check_method_ordering() -> None:
    results = check_method_ordering(
        {"seqft": 20.0, "reservoir_replay": 40.0, "surprise_replay": 40.5, "slow_surprise": 45.0}
    )

    assert [
        CheckResult("replay_beats_finetuning", True, "seqft 20.00 + 10 <= reservoir_replay 40.00"),
        CheckResult(
            "surprise_matches_reservoir",
            True,
            "reservoir_replay 40.00 + -1 <= surprise_replay 40.50",
        ),
        CheckResult(
            "surprise_beats_reservoir",
            True,
            "reservoir_replay 40.00 + 0 <= surprise_replay 40.50",
        ),
        CheckResult(
            "slow_beats_surprise", True, "surprise_replay 40.50 + 0 <= slow_surprise 45.00"
        ),
    ] == results


@pytest.mark.parametrize(
    "fp,failed",
    [
        (
            {"seqft": 35.0, "reservoir_replay": 40.0, "surprise_replay": 38.0},
            {"replay_beats_finetuning", "surprise_matches_reservoir", "surprise_beats_reservoir"},
        ),
        (
            {"seqft": 20.0, "reservoir_replay": 40.0, "surprise_replay": 39.5},
            {"surprise_beats_reservoir"},
        ),
        (
            {"reservoir_replay": 40.0, "surprise_replay": 41.0, "slow_surprise": 40.9},
            {"slow_beats_surprise"},
        ),
    ],
)
def test_check_method_ordering__failed(fp: dict[str, float], failed: set[str]) -> None:
    results = check_method_ordering(fp)

    assert failed == {r.name for r in results if not r.passed}


def test_check_beta_collapse() -> None:
    assert check_beta_collapse({0.995: 60.0, 0.999: 40.0}).passed
    assert not check_beta_collapse({0.995: 60.0, 0.999: 55.0}).passed
    assert check_beta_collapse({0.995: 60.0, 0.999: 55.0}, margin=5.0).passed


def test_check_replay_ratio() -> None:
    results = check_replay_ratio(
        {"surprise_replay": {1: 50.0, 2: 45.0, 4: 45.0}, "reservoir_replay": {4: 30.0, 2: 35.0}}
    )

    assert [("replay_ratio_reservoir_replay", True), ("replay_ratio_surprise_replay", True)] == [
        (r.name, r.passed) for r in results
    ]
    assert not check_replay_ratio({"seqft": {1: 10.0, 8: 12.0}})[0].passed


def test_summary_checks() -> None:
    rows = [
        _summary_row("seqft", "20.00"),
        _summary_row("reservoir_replay", "41.00", interval="2"),
        _summary_row("reservoir_replay", "30.00", interval="8"),
        _summary_row("surprise_replay", "40.00", interval="2"),
        _summary_row("surprise_replay", "33.00", interval="8"),
        _summary_row("slow_surprise", "50.00", beta="0.995"),
        _summary_row("slow_surprise", "30.00", beta="0.999"),
        _summary_row("slow_random", "45.00", beta="0.995"),
        _summary_row("slow_random", ""),
    ]

    results = summary_checks(rows)

    assert {
        "replay_beats_finetuning": True,
        "surprise_matches_reservoir": True,
        "surprise_beats_reservoir": True,
        "slow_beats_surprise": True,
        "beta_collapse_slow_surprise": True,
        "replay_ratio_reservoir_replay": True,
        "replay_ratio_surprise_replay": True,
        "surprise_at_rarest_replay": True,
    } == {r.name: r.passed for r in results}
    assert "k=8" in results[-1].detail


def test_summary_checks__empty() -> None:
    assert [] == summary_checks([_summary_row("seqft", "")])


def test_log_results(caplog: pytest.LogCaptureFixture) -> None:
    caplog.set_level(logging.INFO)

    assert log_results([CheckResult("a", True, "fine")])
    assert not log_results([CheckResult("a", True, "fine"), CheckResult("b", False, "bad")])
    assert ("surelab.acceptance", logging.ERROR, "FAIL b: bad") in caplog.record_tuples
    assert ("surelab.acceptance", logging.INFO, "PASS a: fine") in caplog.record_tuples


@pytest.mark.slow
def test_run_theory_suite() -> None:
    suite = run_theory_suite(n_seeds=3, quick=True)

    assert [0.0, 0.9, 0.99, 0.995] == [r.beta for r in suite.ema_rows]
    assert [0.9, 0.99] == [r.beta for r in suite.noise_rows]
    assert 3 * 3 * 3 == len(suite.complementarity_rows)
    assert suite.correlation.n > 3
    results = {r.name: r for r in theory_checks(suite)}
    assert results["mmd_two_point"].passed
    assert results["ema_variance_decreasing"].passed
