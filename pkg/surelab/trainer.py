"""
Training of the dual-adapter learner over a sequence of tasks.

One task is trained by plain SGD on the fast adapters. Every `k`-th step the current batch is
joined by a batch drawn from the replay memory. After every fast step the slow adapters either
track the fast ones by an exponential moving average (the `slow_*` methods) or are overwritten by
them (every other method).
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, TypeAlias

import numpy as np

from surelab.autodiff import FloatArray, GradTape, Tensor, backward
from surelab.buffer import BufferPolicy, BufferTiming, ReplayBatch, ReplayMemory
from surelab.errors import ConfigError, EmptyDataError, PolicyError, SurelabError
from surelab.metrics import AccuracyMatrix
from surelab.model import (
    AdapterMode,
    AdapterSet,
    DualAdapterModel,
    ModelConfig,
    copy_fast_to_slow,
    greedy_decode,
    init_model,
    model_logits,
    span_mask,
)
from surelab.optim import SgdConfig, SgdStats, sgd_step
from surelab.rng import get_seed_sequence, make_rng
from surelab.surprise import SurpriseScore, SurpriseVariant, score_batch
from surelab.tasks import (
    Example,
    SyntheticTaskSpec,
    TaskData,
    TaskStream,
    generate_stream,
    stack_tokens,
)

_LOG = logging.getLogger(__name__)


class Method(Enum):
    SEQFT = "seqft"
    RESERVOIR_REPLAY = "reservoir_replay"
    SURPRISE_REPLAY = "surprise_replay"
    RANDOM_REPLAY = "random_replay"
    SLOW_RESERVOIR = "slow_reservoir"
    SLOW_SURPRISE = "slow_surprise"
    SLOW_RANDOM = "slow_random"

    @property
    def policy(self) -> BufferPolicy | None:
        """The replay policy of this method, or `None` if it does not replay."""
        if self == Method.SEQFT:
            return None
        return BufferPolicy(self.value.removeprefix("slow_").split("_")[0])

    @property
    def is_slow(self) -> bool:
        return self.value.startswith("slow_")

    @property
    def eval_mode(self) -> AdapterMode:
        return AdapterMode.SLOW if self.is_slow else AdapterMode.FAST


AnyMethod: TypeAlias = str | Method
"""Type alias for anything that can be converted to a `Method`."""


def get_method(method: AnyMethod) -> Method:
    """Get a `Method` for the given method-like value."""
    if isinstance(method, str):
        return Method(method)
    if isinstance(method, Method):
        return method
    raise AssertionError(f"Unknown type of method: {type(method)}")


class LossSpan(Enum):
    LABEL = "label"
    """Cross-entropy on the label tokens only."""

    FULL = "full"
    """Next-token cross-entropy over the whole sequence."""


class Decoding(Enum):
    LABELS = "labels"
    """
    Greedy decoding restricted to the label tokens of the stream.

    A model that knows nothing scores `1 / L` on a balanced task, for `L` label tokens in the
    stream.
    """

    VOCAB = "vocab"
    """Greedy decoding over the whole vocabulary."""


@dataclass(frozen=True)
class TrainSchedule:
    method: Method = Method.SLOW_SURPRISE
    batch_size: int = 64
    replay_batch: int = 32
    replay_interval: int = 2
    """Every `replay_interval`-th step of a task is mixed with a replay batch."""

    epochs: int = 1
    beta: float = 0.995
    timing: BufferTiming | None = None
    """`None` picks `online` for the reservoir policy and `sb-ub` otherwise."""

    surprise_variant: SurpriseVariant = SurpriseVariant.AVG_SEQUENCE
    aging: bool = False
    loss_span: LossSpan = LossSpan.LABEL
    decode: Decoding = Decoding.LABELS
    sgd: SgdConfig = SgdConfig()
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ["batch_size", "replay_batch", "replay_interval", "epochs"]:
            value = getattr(self, name)
            if not (isinstance(value, int) and value >= 1):
                raise ConfigError(f"schedule.{name} must be a positive integer. Found: {value!r}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"schedule.beta must be in (0, 1). Found: {self.beta}")
        if self.seed < 0:
            raise ConfigError(f"schedule.seed must be non-negative. Found: {self.seed}")
        policy = self.method.policy
        if self.timing == BufferTiming.ONLINE and policy not in (None, BufferPolicy.RESERVOIR):
            raise ConfigError(f"Online timing requires a reservoir method. Found: {self.method}")
        if self.aging and policy != BufferPolicy.SURPRISE:
            raise ConfigError(f"Aging requires a surprise method. Found: {self.method}")

    @property
    def effective_timing(self) -> BufferTiming:
        if self.timing is not None:
            return self.timing
        if self.method.policy == BufferPolicy.RESERVOIR:
            return BufferTiming.ONLINE
        return BufferTiming.SB_UB


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines one training run over one task order."""

    model: ModelConfig = ModelConfig()
    schedule: TrainSchedule = TrainSchedule()
    stream: SyntheticTaskSpec = SyntheticTaskSpec()
    n_tasks: int = 8
    stream_seed: int = 0
    order: tuple[int, ...] | None = None
    """Permutation of task indices. `None` means the generation order."""

    buffer_size: int | None = None
    buffer_fraction: float = 0.02
    """Capacity as a fraction of all training examples of the stream. Ignored if `buffer_size`."""

    def __post_init__(self) -> None:
        if self.model.vocab_size < self.stream.vocab_size:
            raise ConfigError(
                "The model vocabulary is smaller than the stream vocabulary."
                f" Found: {self.model.vocab_size=}, {self.stream.vocab_size=}"
            )
        if self.model.max_seq_len < self.stream.sequence_length:
            raise ConfigError(
                "Stream sequences are longer than the model context."
                f" Found: {self.model.max_seq_len=}, {self.stream.sequence_length=}"
            )
        if self.order is not None and sorted(self.order) != list(range(self.n_tasks)):
            raise ConfigError(f"Task order must be a permutation of 0..{self.n_tasks - 1}.")
        if self.buffer_size is not None and self.buffer_size < 1:
            raise ConfigError(f"buffer.size must be positive. Found: {self.buffer_size}")
        if not 0.0 < self.buffer_fraction <= 1.0:
            raise ConfigError(f"buffer.fraction must be in (0, 1]. Found: {self.buffer_fraction}")

    @property
    def task_order(self) -> tuple[int, ...]:
        return self.order if self.order is not None else tuple(range(self.n_tasks))

    def buffer_capacity(self, n_train: int) -> int:
        if self.buffer_size is not None:
            return self.buffer_size
        return max(1, int(round(self.buffer_fraction * n_train)))


@dataclass(frozen=True)
class StepRecord:
    step: int
    task: int
    loss: float
    mixed: bool
    replayed: int
    rejected: bool

    def to_json(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "task": self.task,
            "loss": self.loss,
            "mixed": self.mixed,
            "replayed": self.replayed,
            "rejected": self.rejected,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> StepRecord:
        return cls(
            int(data["step"]),
            int(data["task"]),
            float(data["loss"]),
            bool(data["mixed"]),
            int(data["replayed"]),
            bool(data["rejected"]),
        )


@dataclass
class RunState:
    position: int
    """Number of tasks of the order already trained."""

    step: int
    model: DualAdapterModel
    memory: ReplayMemory | None
    rng: np.random.Generator
    rows: list[FloatArray] = field(default_factory=list)
    """One accuracy row per trained task."""

    log: list[StepRecord] = field(default_factory=list)
    log_offset: int = 0
    """Number of step records emitted before `log[0]`."""

    sgd_stats: SgdStats = field(default_factory=SgdStats)

    @property
    def log_count(self) -> int:
        return self.log_offset + len(self.log)


StepHook: TypeAlias = Callable[[StepRecord, RunState], None]
BoundaryHook: TypeAlias = Callable[[RunState], None]


def init_run_state(config: RunConfig, stream: TaskStream) -> RunState:
    """A fresh state: a new model and, for replay methods, an empty memory."""
    schedule = config.schedule
    model_seed, train_seed = get_seed_sequence(schedule.seed).spawn(2)
    memory = None
    policy = schedule.method.policy
    if policy is not None:
        memory = ReplayMemory(
            config.buffer_capacity(stream.n_train),
            policy,
            schedule.effective_timing,
            schedule.aging,
        )
    return RunState(0, 0, init_model(config.model, model_seed), memory, make_rng(train_seed))


def ema_update(
    slow: AdapterSet | Sequence[Tensor], fast: AdapterSet | Sequence[Tensor], beta: float
) -> None:
    """`θ_slow ← β θ_slow + (1 - β) θ_fast`, element-wise, in place."""
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"EMA rate must be in (0, 1). Found: {beta=}")
    slow_tensors = slow.tensors() if isinstance(slow, AdapterSet) else list(slow)
    fast_tensors = fast.tensors() if isinstance(fast, AdapterSet) else list(fast)
    assert len(slow_tensors) == len(fast_tensors), "Slow and fast parameters differ in number."
    for s, f in zip(slow_tensors, fast_tensors):
        assert s.shape == f.shape, f"Shape mismatch. Found: {s.shape=}, {f.shape=}"
        s.assign(beta * s.data + (1.0 - beta) * f.data)


def ema_weights(beta: float, t: int) -> FloatArray:
    """
    Weights of the slow iterate after `t` EMA updates.

    Element `0` weighs the initial slow value, element `i > 0` weighs the `i`-th fast iterate. They
    sum to one and are the solution of the exponentially weighted least-squares fit.
    """
    assert t >= 0, f"Number of updates must be non-negative. Found: {t=}"
    i = np.arange(1, t + 1)
    return np.concatenate([[beta**t], (1.0 - beta) * beta ** (t - i)])


def _loss_and_gradients(
    model: DualAdapterModel,
    examples: Sequence[Example],
    loss_span: LossSpan,
    rng: np.random.Generator,
) -> tuple[float, dict[Tensor, FloatArray]]:
    tokens = stack_tokens(examples)
    spans = [e.label_span if loss_span == LossSpan.LABEL else e.full_span for e in examples]
    rows, positions = np.nonzero(span_mask(tokens.shape[1], spans))
    tape = GradTape()
    logits = model_logits(tape, model, tokens, AdapterMode.FAST, train=True, rng=rng)
    predicted = tape.select(logits, (rows, positions - 1))
    loss = tape.cross_entropy(predicted, tokens[rows, positions], reduction="mean")
    gradients = backward(tape, loss, model.fast.tensors())
    return float(loss.data), gradients


def _insert_candidates(
    state: RunState,
    task: TaskData,
    schedule: TrainSchedule,
    scores: list[SurpriseScore] | None,
) -> None:
    memory = state.memory
    assert memory is not None
    match memory.policy:
        case BufferPolicy.SURPRISE:
            if scores is None:
                scores = score_batch(
                    state.model, task.train, schedule.surprise_variant, AdapterMode.FAST, state.step
                )
            update = memory.surprise_task_update(task.task_id, task.train, scores, state.step)
            _LOG.info(
                "Task %d: stored %d under quota %d.", task.task_id, update.stored, update.quota
            )
        case BufferPolicy.RANDOM:
            memory.random_task_update(task.task_id, task.train, state.rng, state.step)
        case BufferPolicy.RESERVOIR:
            for example in task.train:
                memory.reservoir_update(example, state.rng, state.step)


def train_on_task(
    state: RunState,
    task: TaskData,
    schedule: TrainSchedule,
    on_step: StepHook | None = None,
) -> RunState:
    """
    Train on one task, updating `state` in place.

    Candidates for the memory are scored and inserted before or after training depending on the
    buffer timing. With `online` timing every example is offered to the reservoir as its batch is
    trained on, during the first epoch.
    """
    examples = task.train
    if not examples:
        raise EmptyDataError(f"Task {task.task_id} has no training examples.")
    memory = state.memory
    policy = schedule.method.policy
    if policy is not None and (memory is None or memory.policy != policy):
        raise PolicyError(f"Method {schedule.method.value} needs a {policy.value} memory.")
    timing = schedule.effective_timing
    model = state.model

    scores = None
    if policy == BufferPolicy.SURPRISE and timing.scores_before:
        scores = score_batch(
            model, examples, schedule.surprise_variant, AdapterMode.FAST, state.step
        )
    if memory is not None and timing.inserts_before:
        _insert_candidates(state, task, schedule, scores)

    n_batches = -(-len(examples) // schedule.batch_size)
    s = 0
    for epoch in range(schedule.epochs):
        permutation = state.rng.permutation(len(examples))
        for b in range(n_batches):
            s += 1
            current = [
                examples[int(i)]
                for i in permutation[b * schedule.batch_size : (b + 1) * schedule.batch_size]
            ]
            replay = ReplayBatch((), (), False)
            if memory is not None and s % schedule.replay_interval == 0:
                replay = memory.sample_replay_batch(schedule.replay_batch, state.rng)
            loss, gradients = _loss_and_gradients(
                model, current + replay.examples, schedule.loss_span, state.rng
            )
            accepted = sgd_step(model.fast.tensors(), gradients, schedule.sgd, state.sgd_stats)
            state.step += 1
            # A rejected step leaves both adapter sets untouched.
            if accepted:
                if schedule.method.is_slow:
                    ema_update(model.slow, model.fast, schedule.beta)
                else:
                    copy_fast_to_slow(model)
            if memory is not None and memory.aging and len(replay) > 0:
                memory.rescore_on_replay(model, replay, schedule.surprise_variant, state.step)
            if memory is not None and timing == BufferTiming.ONLINE and epoch == 0:
                for example in current:
                    memory.reservoir_update(example, state.rng, state.step)

            record = StepRecord(
                state.step, task.task_id, loss, len(replay) > 0, len(replay), not accepted
            )
            state.log.append(record)
            if on_step is not None:
                on_step(record, state)

    if memory is not None and timing in (BufferTiming.SB_UA, BufferTiming.SA_UA):
        _insert_candidates(state, task, schedule, scores)
    return state


def evaluate_all_tasks(
    model: DualAdapterModel,
    test_splits: Sequence[Sequence[Example]],
    mode: AdapterMode,
    allowed: Sequence[int] | None = None,
) -> FloatArray:
    """
    Exact-match accuracy of greedily decoded label spans, one value per split.

    :param allowed: If given, decoding is restricted to these tokens.
    """
    result = np.zeros(len(test_splits))
    for j, split in enumerate(test_splits):
        assert split, f"Test split {j} is empty."
        correct = 0
        by_length: dict[tuple[int, int], list[Example]] = {}
        for e in split:
            by_length.setdefault((len(e.prompt), len(e.target)), []).append(e)
        for (_, n_target), group in by_length.items():
            if n_target == 0:
                continue
            predicted = greedy_decode(
                model, np.array([e.prompt for e in group]), n_target, mode, allowed
            )
            targets = np.array([e.target for e in group])
            correct += int(np.all(predicted == targets, axis=1).sum())
        result[j] = correct / len(split)
    return result


def run_task_sequence(
    config: RunConfig,
    stream: TaskStream | None = None,
    state: RunState | None = None,
    on_boundary: BoundaryHook | None = None,
    on_step: StepHook | None = None,
) -> tuple[RunState, AccuracyMatrix]:
    """
    Train on every task of the configured order, evaluating all tasks after each one.

    :param stream: The stream to use. Generated from `config` if not given.
    :param state: State to resume from. A fresh state is created if not given.
    :param on_boundary: Called after every task, once its accuracy row has been recorded.
    """
    if stream is None:
        stream = generate_stream(config.stream, config.n_tasks, config.stream_seed)
    if len(stream) != config.n_tasks:
        raise ConfigError(f"Expected a stream of {config.n_tasks} tasks. Found: {len(stream)}")
    if state is None:
        state = init_run_state(config, stream)
    schedule = config.schedule
    order = config.task_order
    test_splits = [stream[t].test for t in order]
    allowed = stream.label_tokens if schedule.decode == Decoding.LABELS else None

    while state.position < len(order):
        task = stream[order[state.position]]
        try:
            train_on_task(state, task, schedule, on_step)
            row = evaluate_all_tasks(state.model, test_splits, schedule.method.eval_mode, allowed)
        except SurelabError:
            _LOG.error(
                "Run aborted in task %d at step %d. Last boundary state: %d tasks.",
                task.task_id,
                state.step,
                state.position,
            )
            raise
        state.rows.append(row)
        state.position += 1
        _LOG.info(
            "Trained task %d (%d/%d). Seen-task accuracy: %.4f.",
            task.task_id,
            state.position,
            len(order),
            float(row[: state.position].mean()),
        )
        if on_boundary is not None:
            on_boundary(state)

    return state, AccuracyMatrix.from_rows(state.rows, len(order))
