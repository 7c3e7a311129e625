"""
Pass/fail checks over gradients, the theory experiments and experiment summaries.

Each check returns a `CheckResult`; the command line exits with status 3 if any of them fails.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from surelab.autodiff import GradCheckReport, GradTape, Graph, Tensor, check_gradients
from surelab.model import AdapterMode, ModelConfig, init_model, model_logits
from surelab.rng import make_rng, split_rng
from surelab.tasks import SyntheticTaskSpec, generate_stream
from surelab.theory import (
    ComplementarityRow,
    CorrelationReport,
    EmaRow,
    MmdEstimate,
    NoiseRow,
    QuadraticTaskFamily,
    RbfKernel,
    complementarity_experiment,
    ema_noise_experiment,
    ema_quadratic_experiment,
    mean_surface,
    mmd_unbiased,
    surprise_gradient_correlation,
)

_LOG = logging.getLogger(__name__)

GRAD_CHECK_MODEL = ModelConfig(
    vocab_size=11,
    model_dim=8,
    layers=1,
    heads=2,
    max_seq_len=8,
    dropout_rate=0.0,
    lora_rank=2,
    lora_alpha=4.0,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def gradient_check_model(seed: int = 0, tolerance: float = 1e-3) -> GradCheckReport:
    """
    Check the gradients of a tiny transformer with respect to every one of its tensors.

    The fast path is checked against the base weights and the fast adapters, the slow path against
    the slow adapters. All adapter `B` matrices are randomised first, so every adapter gradient is
    non-trivial.
    """
    model = init_model(GRAD_CHECK_MODEL, seed)
    rng = make_rng(seed + 1)
    for adapter in [*model.fast.values(), *model.slow.values()]:
        adapter.b.assign(rng.normal(0.0, 0.5, size=adapter.b.shape))
    tokens = rng.integers(0, GRAD_CHECK_MODEL.vocab_size, size=(2, 6))

    def _graph(mode: AdapterMode) -> Graph:
        def _loss(tape: GradTape, _: Sequence[Tensor]) -> Sequence[Tensor]:
            logits = model_logits(tape, model, tokens, mode)
            predicted = tape.select(logits, (np.arange(2), np.full(2, 4)))
            return [tape.cross_entropy(predicted, tokens[:, 5])]

        return _loss

    fast = check_gradients(
        _graph(AdapterMode.FAST), model.base.tensors() + model.fast.tensors(), tolerance=tolerance
    )
    slow = check_gradients(_graph(AdapterMode.SLOW), model.slow.tensors(), tolerance=tolerance)
    return GradCheckReport({**fast.errors, **slow.errors}, tolerance)


def check_gradient(tolerance: float = 1e-3) -> CheckResult:
    report = gradient_check_model(tolerance=tolerance)
    worst = max(report.errors, key=lambda k: report.errors[k])
    return CheckResult(
        "gradient",
        report.passed,
        f"max relative error {report.max_error:.3g} ({worst}), tolerance {tolerance:g}",
    )


@dataclass(frozen=True)
class TheorySuite:
    mmd_null: MmdEstimate
    mmd_two_point: MmdEstimate
    ema_rows: Sequence[EmaRow]
    noise_rows: Sequence[NoiseRow]
    complementarity_rows: Sequence[ComplementarityRow]
    correlation: CorrelationReport


def run_theory_suite(n_seeds: int = 20, quick: bool = False) -> TheorySuite:
    """Run every theory experiment with the settings the checks expect."""
    seeds = list(range(n_seeds))
    null_rng = make_rng(0)
    null = null_rng.normal(size=(4000 if not quick else 800, 2))
    half = len(null) // 2
    mmd_null = mmd_unbiased(null[:half], null[half:])
    x = np.zeros((2, 2))
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    two_point = mmd_unbiased(x, y, RbfKernel(1.0))

    scalar_family = QuadraticTaskFamily(np.zeros((1, 1)), np.ones(1), noise=1.0, drift=0.0)
    ema_rows = ema_quadratic_experiment(
        scalar_family,
        learning_rate=0.01,
        betas=[0.0, 0.9, 0.99, 0.995],
        n_steps=8_000 if quick else 30_000,
        seeds=seeds,
    )
    noise_rows = ema_noise_experiment(
        [0.9, 0.99], noise=1.0, n_steps=20_000 if quick else 100_000, seeds=seeds
    )

    family = QuadraticTaskFamily.random(dim=5, n_tasks=4, noise=1.0, drift=1.0, seed=0)
    complementarity_rows = complementarity_experiment(
        family,
        fractions=[0.01, 0.1, 1.0],
        betas=[0.0, 0.9, 0.99],
        seeds=seeds[: 5 if quick else n_seeds],
        learning_rate=0.05,
        samples_per_task=200,
        steps_per_task=500 if quick else 2000,
    )

    spec = SyntheticTaskSpec(
        vocab_size=24, label_budget=8, seq_len=8, train_per_class=25, test_per_class=5
    )
    stream = generate_stream(spec, 1, 0)
    config = replace(GRAD_CHECK_MODEL, vocab_size=24, max_seq_len=10)
    model = init_model(config, 0)
    (b_rng,) = split_rng(1, 1)
    for adapter in model.fast.values():
        adapter.b.assign(b_rng.normal(0.0, 0.1, size=adapter.b.shape))
    correlation = surprise_gradient_correlation(model, stream[0].train)
    return TheorySuite(
        mmd_null, two_point, ema_rows, noise_rows, complementarity_rows, correlation
    )


def theory_checks(suite: TheorySuite) -> list[CheckResult]:
    results = [
        CheckResult(
            "mmd_null",
            abs(suite.mmd_null.value) <= 0.01,
            f"|MMD²| = {abs(suite.mmd_null.value):.3g} <= 0.01",
        ),
        CheckResult(
            "mmd_two_point",
            abs(suite.mmd_two_point.value - (2.0 - 2.0 * math.exp(-0.5))) <= 1e-6,
            f"MMD² = {suite.mmd_two_point.value:.7f}, expected {2.0 - 2.0 * math.exp(-0.5):.7f}",
        ),
    ]
    for row in suite.noise_rows:
        error = abs(row.measured_variance - row.expected_variance) / row.expected_variance
        results.append(
            CheckResult(
                f"ema_noise_beta_{row.beta:g}",
                error <= 0.05,
                f"variance {row.measured_variance:.4g}, expected {row.expected_variance:.4g}",
            )
        )
    variances = [row.slow_variance for row in suite.ema_rows]
    results.append(
        CheckResult(
            "ema_variance_decreasing",
            all(a > b for a, b in zip(variances, variances[1:])),
            "slow iterate variances " + ", ".join(f"{v:.3g}" for v in variances),
        )
    )
    results.append(check_complementarity(suite.complementarity_rows))
    return results


def check_complementarity(rows: Sequence[ComplementarityRow]) -> CheckResult:
    """
    Neither knob alone reaches the joint optimum: the smallest memory at its best EMA rate, and the
    full memory at its worst EMA rate, both forget at least twice as much as the best cell.
    """
    surface = mean_surface(rows)
    fractions = sorted({f for f, _ in surface})
    betas = sorted({b for _, b in surface})
    best = min(surface.values())
    tiny_best = min(surface[(fractions[0], b)] for b in betas)
    full_best = min(surface[(fractions[-1], b)] for b in betas)
    full_worst = max(surface[(fractions[-1], b)] for b in betas)
    passed = tiny_best >= 2.0 * full_best and full_worst >= 2.0 * best
    return CheckResult(
        "complementarity",
        passed,
        f"tiny memory {tiny_best:.4g}, full memory {full_best:.4g} (worst β {full_worst:.4g}),"
        f" grid minimum {best:.4g}",
    )


def check_method_ordering(fp: Mapping[str, float]) -> list[CheckResult]:
    """
    Directional checks on mean final performance per method, in percent. Checks involving a method
    that was not run are skipped.
    """
    results = []

    def _check(name: str, left: str, right: str, margin: float) -> None:
        if left in fp and right in fp:
            results.append(
                CheckResult(
                    name,
                    fp[left] + margin <= fp[right],
                    f"{left} {fp[left]:.2f} + {margin:g} <= {right} {fp[right]:.2f}",
                )
            )

    _check("replay_beats_finetuning", "seqft", "reservoir_replay", 10.0)
    _check("surprise_matches_reservoir", "reservoir_replay", "surprise_replay", -1.0)
    _check("surprise_beats_reservoir", "reservoir_replay", "surprise_replay", 0.0)
    _check("slow_beats_surprise", "surprise_replay", "slow_surprise", 0.0)
    return results


def check_beta_collapse(
    fp_by_beta: Mapping[float, float], margin: float = 10.0, name: str = "beta_collapse"
) -> CheckResult:
    """A near-one EMA rate with short training lags far behind `β = 0.995`."""
    good, bad = fp_by_beta[0.995], fp_by_beta[0.999]
    return CheckResult(
        name,
        bad + margin <= good,
        f"β=0.999 {bad:.2f} + {margin:g} <= β=0.995 {good:.2f}",
    )


def check_replay_ratio(fp_by_interval: Mapping[str, Mapping[int, float]]) -> list[CheckResult]:
    """Final performance never improves as replay gets rarer, for every method."""
    results = []
    for method, by_interval in sorted(fp_by_interval.items()):
        values = [by_interval[k] for k in sorted(by_interval)]
        results.append(
            CheckResult(
                f"replay_ratio_{method}",
                all(a >= b for a, b in zip(values, values[1:])),
                f"{method}: " + ", ".join(f"{v:.2f}" for v in values),
            )
        )
    return results


def summary_checks(rows: Sequence[Mapping[str, str]]) -> list[CheckResult]:
    """
    Every directional check that the settings present in a summary table allow.

    Method ordering compares the mean over all settings of a method. The EMA-rate check runs for
    every slow method with rows at `β = 0.995` and `β = 0.999`, and the replay-ratio check for
    every method with more than one replay interval.
    """
    fp: dict[str, list[float]] = {}
    by_beta: dict[str, dict[float, list[float]]] = {}
    by_interval: dict[str, dict[int, list[float]]] = {}
    for row in rows:
        if not row["final_performance"]:
            continue
        value = float(row["final_performance"])
        method = row["method"]
        fp.setdefault(method, []).append(value)
        by_beta.setdefault(method, {}).setdefault(float(row["beta"]), []).append(value)
        interval = int(row["replay_interval"])
        by_interval.setdefault(method, {}).setdefault(interval, []).append(value)

    def _means(values: Mapping[Any, list[float]]) -> dict[Any, float]:
        return {k: float(np.mean(v)) for k, v in values.items()}

    results = check_method_ordering(_means(fp))
    for method, betas in sorted(by_beta.items()):
        if method.startswith("slow_") and {0.995, 0.999} <= betas.keys():
            results.append(check_beta_collapse(_means(betas), name=f"beta_collapse_{method}"))
    sweeps = {m: _means(v) for m, v in by_interval.items() if len(v) > 1}
    results.extend(check_replay_ratio(sweeps))
    common = sweeps.get("reservoir_replay", {}).keys() & sweeps.get("surprise_replay", {}).keys()
    if common:
        rarest = max(common)
        reservoir = sweeps["reservoir_replay"][rarest]
        surprise = sweeps["surprise_replay"][rarest]
        results.append(
            CheckResult(
                "surprise_at_rarest_replay",
                surprise >= reservoir,
                f"k={rarest}: surprise_replay {surprise:.2f} >= reservoir_replay {reservoir:.2f}",
            )
        )
    return results


def log_results(results: Sequence[CheckResult]) -> bool:
    """Log every result. `True` if all passed."""
    for r in results:
        if r.passed:
            _LOG.info("PASS %s: %s", r.name, r.detail)
        else:
            _LOG.error("FAIL %s: %s", r.name, r.detail)
    return all(r.passed for r in results)
