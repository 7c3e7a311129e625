"""
Small numerical experiments on how replay selection and slow-weight integration drive forgetting.

* `mmd_unbiased` measures how far a replay sample is from the distribution it stands in for.
* `ema_quadratic_experiment` and `ema_noise_experiment` measure how averaging the iterates of SGD
  trades lag for variance.
* `complementarity_experiment` trains on a sequence of quadratic tasks with subsampled replay and
  an averaged iterate, so the two effects can be varied independently.
* `surprise_gradient_correlation` relates the surprise of an example to the size of its gradient.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy.signal import lfilter
from scipy.spatial.distance import cdist
from scipy.stats import norm, spearmanr

from surelab.autodiff import FloatArray, GradTape, backward
from surelab.errors import ConfigError, EmptyDataError, ShapeError
from surelab.model import AdapterMode, AnyAdapterMode, DualAdapterModel, model_logits, span_mask
from surelab.optim import global_norm
from surelab.rng import AnySeed, get_seed_sequence, make_rng
from surelab.surprise import AnySurpriseVariant, SurpriseVariant, get_surprise_variant, score_batch
from surelab.tasks import Example, stack_tokens

_LOG = logging.getLogger(__name__)

_DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class RbfKernel:
    """`k(x, y) = exp(-‖x - y‖² / (2 h²))`."""

    bandwidth: float

    def __post_init__(self) -> None:
        assert self.bandwidth > 0.0, f"Bandwidth must be positive. Found: {self.bandwidth=}"

    def __call__(self, x: FloatArray, y: FloatArray) -> FloatArray:
        result: FloatArray = np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * self.bandwidth**2))
        return result


def _as_points(samples: ArrayLike) -> FloatArray:
    points = np.asarray(samples, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2:
        raise ShapeError(f"Samples must be a (n, features) array. Found: {points.shape}")
    return points


def median_bandwidth(samples_p: ArrayLike, samples_q: ArrayLike) -> float:
    """Median of the non-zero pairwise distances in the pooled sample. `1.0` if there are none."""
    pooled = np.concatenate([_as_points(samples_p), _as_points(samples_q)])
    distances = cdist(pooled, pooled)
    positive = distances[np.triu_indices(len(pooled), k=1)]
    positive = positive[positive > 0.0]
    return float(np.median(positive)) if positive.size else 1.0


@dataclass(frozen=True)
class MmdEstimate:
    value: float
    """Unbiased estimate of the squared MMD. Can be slightly negative."""

    bandwidth: float
    n_p: int
    n_q: int

    def reported(self, tolerance: float = 1e-3) -> float:
        return max(self.value, -tolerance)


def mmd_unbiased(
    samples_p: ArrayLike, samples_q: ArrayLike, kernel: RbfKernel | None = None
) -> MmdEstimate:
    """
    U-statistic estimate of the squared maximum mean discrepancy between two samples.

    :param kernel: Kernel to use. Defaults to an RBF kernel with the median-heuristic bandwidth.
    """
    p = _as_points(samples_p)
    q = _as_points(samples_q)
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"Feature dimensions differ. Found: {p.shape[1]} and {q.shape[1]}")
    if len(p) < 2 or len(q) < 2:
        raise EmptyDataError(f"Need at least two points per sample. Found: {len(p)}, {len(q)}")
    if kernel is None:
        kernel = RbfKernel(median_bandwidth(p, q))
    m, n = len(p), len(q)
    k_pp = kernel(p, p)
    k_qq = kernel(q, q)
    k_pq = kernel(p, q)
    value = (
        (k_pp.sum() - np.trace(k_pp)) / (m * (m - 1))
        + (k_qq.sum() - np.trace(k_qq)) / (n * (n - 1))
        - 2.0 * k_pq.mean()
    )
    return MmdEstimate(float(value), kernel.bandwidth, m, n)


@dataclass(frozen=True, eq=False)
class QuadraticTaskFamily:
    """
    A sequence of quadratic tasks `R_k(θ) = μ_k / 2 ‖θ - θ*_k‖²`.

    Stochastic gradients carry isotropic Gaussian noise of variance `noise` per coordinate.
    """

    optima: FloatArray
    """Shape `(tasks, dim)`."""

    curvatures: FloatArray
    """Shape `(tasks,)`."""

    noise: float
    drift: float
    """Bound on the distance between consecutive optima."""

    def __post_init__(self) -> None:
        optima = np.atleast_2d(np.asarray(self.optima, dtype=np.float64))
        curvatures = np.asarray(self.curvatures, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "optima", optima)
        object.__setattr__(self, "curvatures", curvatures)
        if len(curvatures) != len(optima):
            raise ConfigError(f"Need one curvature per task. Found: {curvatures.shape=}")
        if not np.all(curvatures > 0.0):
            raise ConfigError(f"Curvatures must be positive. Found: {curvatures}")
        if self.noise < 0.0:
            raise ConfigError(f"Noise must be non-negative. Found: {self.noise}")
        steps = np.linalg.norm(np.diff(optima, axis=0), axis=1)
        if np.any(steps > self.drift + 1e-12):
            raise ConfigError(f"Consecutive optima drift more than {self.drift}. Found: {steps}")

    @classmethod
    def random(
        cls,
        dim: int,
        n_tasks: int,
        curvature: float = 1.0,
        noise: float = 1.0,
        drift: float = 1.0,
        seed: AnySeed = 0,
    ) -> QuadraticTaskFamily:
        """Optima on a random walk from the origin with steps of length exactly `drift`."""
        rng = make_rng(seed)
        directions = rng.normal(size=(n_tasks - 1, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        optima = np.concatenate([np.zeros((1, dim)), np.cumsum(drift * directions, axis=0)])
        return cls(optima, np.full(n_tasks, curvature), noise, drift)

    @property
    def dim(self) -> int:
        return int(self.optima.shape[1])

    @property
    def n_tasks(self) -> int:
        return int(self.optima.shape[0])

    @property
    def smoothness(self) -> float:
        return float(self.curvatures.max())

    def excess_risk(self, task: int, theta: FloatArray) -> FloatArray:
        """`R_k(θ) - R_k(θ*_k)` over the last axis of `theta`."""
        diff = theta - self.optima[task]
        result: FloatArray = 0.5 * self.curvatures[task] * (diff * diff).sum(axis=-1)
        return result


def _ema(trajectory: FloatArray, beta: float, initial: FloatArray) -> FloatArray:
    """Apply `s_t = β s_{t-1} + (1 - β) x_t` along the first axis, starting from `initial`."""
    if beta == 0.0:
        return trajectory.copy()
    result: FloatArray
    result, _ = lfilter([1.0 - beta], [1.0, -beta], trajectory, axis=0, zi=beta * initial[None])
    return result


def _burn_in(beta: float) -> int:
    return int(math.ceil(10.0 / (1.0 - beta)))


def _check_betas(betas: Sequence[float]) -> None:
    if not betas:
        raise ConfigError("The grid of EMA rates is empty.")
    for beta in betas:
        if not 0.0 <= beta < 1.0:
            raise ConfigError(f"EMA rates must be in [0, 1). Found: {beta}")


def _diverged(trajectory: FloatArray) -> bool:
    with np.errstate(invalid="ignore"):
        return not np.all(np.isfinite(trajectory)) or bool(
            np.abs(trajectory).max() > _DIVERGENCE_LIMIT
        )


@dataclass(frozen=True)
class EmaRow:
    beta: float
    slow_excess_risk: float
    fast_excess_risk: float
    slow_variance: float
    fast_variance: float
    diverged: bool


def ema_quadratic_experiment(
    family: QuadraticTaskFamily,
    learning_rate: float,
    betas: Sequence[float],
    n_steps: int,
    seeds: Sequence[int],
    task: int = 0,
) -> list[EmaRow]:
    """
    Run SGD on one task of `family` and compare the raw iterate with its moving averages.

    Statistics are taken at stationarity, after a burn-in of ten averaging windows `1 / (1 - β)`.
    Excess risks are averaged over steps and seeds; variances are the per-seed variance of the
    iterate over time, summed over coordinates and averaged over seeds.
    """
    _check_betas(betas)
    if not seeds:
        raise ConfigError("No seeds given.")
    longest = max(_burn_in(b) for b in betas)
    if n_steps <= longest + 1:
        raise ConfigError(f"{n_steps} steps do not cover the burn-in of {longest} steps.")
    if learning_rate > 1.0 / family.smoothness:
        _LOG.warning("Learning rate %g exceeds 1/L = %g.", learning_rate, 1.0 / family.smoothness)

    mu = family.curvatures[task]
    optimum = family.optima[task]
    noise = np.stack(
        [make_rng(seed).normal(size=(n_steps, family.dim)) for seed in seeds], axis=1
    )
    trajectory = np.zeros((n_steps, len(seeds), family.dim))
    theta = np.zeros((len(seeds), family.dim))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(n_steps):
            gradient = mu * (theta - optimum) + math.sqrt(family.noise) * noise[t]
            theta = theta - learning_rate * gradient
            trajectory[t] = theta
    diverged = _diverged(trajectory)
    if diverged:
        _LOG.warning("SGD diverged with learning rate %g.", learning_rate)

    def _stats(values: FloatArray, burn_in: int) -> tuple[float, float]:
        tail = values[burn_in:]
        excess = float(family.excess_risk(task, tail).mean())
        variance = float(tail.var(axis=0).sum(axis=-1).mean())
        return excess, variance

    rows = []
    for beta in betas:
        burn_in = _burn_in(beta)
        with np.errstate(over="ignore", invalid="ignore"):
            slow = _ema(trajectory, beta, np.zeros((len(seeds), family.dim)))
            slow_excess, slow_variance = _stats(slow, burn_in)
            fast_excess, fast_variance = _stats(trajectory, burn_in)
        rows.append(
            EmaRow(beta, slow_excess, fast_excess, slow_variance, fast_variance, diverged)
        )
    return rows


@dataclass(frozen=True)
class NoiseRow:
    beta: float
    measured_variance: float
    expected_variance: float
    """`σ² (1 - β) / (1 + β)`."""


def ema_noise_experiment(
    betas: Sequence[float], noise: float, n_steps: int, seeds: Sequence[int]
) -> list[NoiseRow]:
    """Stationary variance of the moving average of i.i.d. Gaussian noise."""
    _check_betas(betas)
    samples = np.stack(
        [make_rng(seed).normal(0.0, math.sqrt(noise), size=n_steps) for seed in seeds], axis=1
    )
    rows = []
    for beta in betas:
        burn_in = _burn_in(beta)
        if n_steps <= burn_in + 1:
            raise ConfigError(f"{n_steps} steps do not cover the burn-in of {burn_in} steps.")
        averaged = _ema(samples, beta, np.zeros(len(seeds)))[burn_in:]
        rows.append(
            NoiseRow(beta, float(averaged.var(axis=0).mean()), noise * (1 - beta) / (1 + beta))
        )
    return rows


@dataclass(frozen=True)
class ComplementarityRow:
    fraction: float
    beta: float
    seed: int
    forgetting: float
    """Excess risk of the final averaged iterate on the average of all task risks."""

    mmd: float
    """Squared MMD between the replay memory and all past data, at the last task boundary."""


def _loss_features(
    family: QuadraticTaskFamily, points: FloatArray, tasks: FloatArray
) -> FloatArray:
    """Per-example losses `μ_k / 2 ‖θ - x‖²`, one column per task optimum `θ`."""
    mu = family.curvatures[tasks.astype(np.int64)][:, None]
    result: FloatArray = 0.5 * mu * cdist(points, family.optima, "sqeuclidean")
    return result


def complementarity_experiment(
    family: QuadraticTaskFamily,
    fractions: Sequence[float],
    betas: Sequence[float],
    seeds: Sequence[int],
    learning_rate: float = 0.05,
    samples_per_task: int = 200,
    steps_per_task: int = 2000,
) -> list[ComplementarityRow]:
    """
    Train sequentially on the tasks of `family` with a random replay memory and an averaged
    iterate, over a grid of memory fractions and EMA rates.

    Every task is a finite dataset of `samples_per_task` points drawn around its optimum, with
    per-example loss `μ_k / 2 ‖θ - x‖²`. The memory keeps a random `fraction` of each past task.
    A step mixes one current and one replayed example, weighted so that the expected gradient is
    that of the average risk over all tasks seen so far.

    Within one seed all grid cells share the data, the memory draws and the step noise. Memories
    of smaller fractions are subsets of memories of larger ones.
    """
    _check_betas(betas)
    if not fractions or not seeds:
        raise ConfigError("The grid of memory fractions or the list of seeds is empty.")
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"Memory fractions must be in (0, 1]. Found: {fraction}")
    if family.n_tasks < 2:
        raise ConfigError(f"Need at least two tasks. Found: {family.n_tasks}")

    n_tasks, dim = family.n_tasks, family.dim
    mu = family.curvatures
    rows = []
    for seed in seeds:
        data_seed, order_seed, draw_seed = get_seed_sequence(seed).spawn(3)
        data_rng = make_rng(data_seed)
        data = family.optima[:, None, :] + math.sqrt(family.noise) * data_rng.normal(
            size=(n_tasks, samples_per_task, dim)
        )
        order_rng = make_rng(order_seed)
        priority = np.stack([order_rng.permutation(samples_per_task) for _ in range(n_tasks)])
        draw_rng = make_rng(draw_seed)
        draws = draw_rng.random((n_tasks, steps_per_task, 3))

        joint_optimum = (mu[:, None] * data.mean(axis=1)).sum(axis=0) / mu.sum()
        past_points = data[:-1].reshape(-1, dim)
        past_tasks = np.repeat(np.arange(n_tasks - 1), samples_per_task).astype(np.float64)
        past_features = _loss_features(family, past_points, past_tasks)

        for fraction in fractions:
            kept = max(1, int(round(fraction * samples_per_task)))
            memory = data[np.arange(n_tasks)[:, None], priority[:, :kept]]
            theta = np.zeros(dim)
            trajectory = np.zeros((n_tasks * steps_per_task, dim))
            for k in range(n_tasks):
                for t in range(steps_per_task):
                    u_current, u_task, u_item = draws[k, t]
                    x = data[k, int(u_current * samples_per_task)]
                    gradient = mu[k] * (theta - x)
                    if k > 0:
                        j = int(u_task * k)
                        replayed = memory[j, int(u_item * kept)]
                        gradient = (gradient + k * mu[j] * (theta - replayed)) / (k + 1)
                    theta = theta - learning_rate * gradient
                    trajectory[k * steps_per_task + t] = theta
            if _diverged(trajectory):
                _LOG.warning("Diverged: fraction=%g, seed=%d.", fraction, seed)

            memory_points = memory[:-1].reshape(-1, dim)
            memory_tasks = np.repeat(np.arange(n_tasks - 1), kept).astype(np.float64)
            memory_features = _loss_features(family, memory_points, memory_tasks)
            if len(memory_features) >= 2:
                mmd = mmd_unbiased(memory_features, past_features).value
            else:
                mmd = float("nan")

            for beta in betas:
                final = _ema(trajectory, beta, np.zeros(dim))[-1]
                diff = final - joint_optimum
                excess = 0.5 * mu.mean() * float(diff @ diff)
                rows.append(ComplementarityRow(fraction, beta, int(seed), excess, mmd))
    return rows


def mean_surface(rows: Sequence[ComplementarityRow]) -> Mapping[tuple[float, float], float]:
    """Mean forgetting per `(fraction, beta)` cell, over seeds."""
    cells: dict[tuple[float, float], list[float]] = {}
    for row in rows:
        cells.setdefault((row.fraction, row.beta), []).append(row.forgetting)
    return {key: float(np.mean(values)) for key, values in sorted(cells.items())}


@dataclass(frozen=True)
class CorrelationReport:
    rho: float
    """Spearman rank correlation. NaN if undefined."""

    ci_low: float
    ci_high: float
    n: int

    @property
    def defined(self) -> bool:
        return not math.isnan(self.rho)


def per_example_gradient_norms(
    model: DualAdapterModel,
    examples: Sequence[Example],
    variant: AnySurpriseVariant = SurpriseVariant.AVG_SEQUENCE,
    mode: AnyAdapterMode = AdapterMode.FAST,
) -> FloatArray:
    """
    Norm of the gradient of each example's surprise with respect to the adapters of `mode`.

    The surprise and the gradient use the same target span and reduction.
    """
    variant = get_surprise_variant(variant)
    adapters = model.adapters(mode)
    assert adapters is not None, "Gradient norms need an adapter set."
    params = adapters.tensors()
    saved = [p.requires_grad for p in params]
    result = np.zeros(len(examples))
    try:
        for p in params:
            p.requires_grad = True
        for i, example in enumerate(examples):
            span = example.full_span
            if variant == SurpriseVariant.LABEL_ONLY:
                span = example.label_span
            tokens = stack_tokens([example])
            _, positions = np.nonzero(span_mask(tokens.shape[1], [span]))
            tape = GradTape()
            logits = model_logits(tape, model, tokens, mode)
            predicted = tape.select(logits, (np.zeros_like(positions), positions - 1))
            reduction = "sum" if variant == SurpriseVariant.SUM_SEQUENCE else "mean"
            loss = tape.cross_entropy(predicted, tokens[0, positions], reduction=reduction)
            gradients = backward(tape, loss, params)
            result[i] = global_norm([gradients[p] for p in params])
    finally:
        for p, requires_grad in zip(params, saved):
            p.requires_grad = requires_grad
    return result


def surprise_gradient_correlation(
    model: DualAdapterModel,
    examples: Sequence[Example],
    variant: AnySurpriseVariant = SurpriseVariant.AVG_SEQUENCE,
    mode: AnyAdapterMode = AdapterMode.FAST,
    confidence: float = 0.95,
) -> CorrelationReport:
    """
    Spearman correlation between per-example surprise and per-example gradient norm.

    The confidence interval uses the Fisher transform with standard error `1.06 / sqrt(n - 3)`.
    """
    surprise = np.array([s.value for s in score_batch(model, examples, variant, mode)])
    norms = per_example_gradient_norms(model, examples, variant, mode)
    return rank_correlation(surprise, norms, confidence)


def rank_correlation(x: ArrayLike, y: ArrayLike, confidence: float = 0.95) -> CorrelationReport:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    n = len(a)
    nan = float("nan")
    if n < 2 or np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        _LOG.warning("Rank correlation is undefined for constant or tiny samples (n=%d).", n)
        return CorrelationReport(nan, nan, nan, n)
    rho = float(spearmanr(a, b)[0])
    if n <= 3:
        return CorrelationReport(rho, nan, nan, n)
    z = math.atanh(float(np.clip(rho, -1.0 + 1e-12, 1.0 - 1e-12)))
    half_width = float(norm.ppf(0.5 + confidence / 2.0)) * 1.06 / math.sqrt(n - 3)
    return CorrelationReport(rho, math.tanh(z - half_width), math.tanh(z + half_width), n)
