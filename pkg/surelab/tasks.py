"""
Deterministic synthetic class-incremental task streams.

Every class of every task is an order-1 Markov chain over the content tokens. A sequence is
`T` content tokens, the separator token, then the class's label token. Label tokens are disjoint
across tasks, so the label space grows with every task.

Token layout: `0` is the separator, `1..label_budget` are label tokens and the remaining ids are
content tokens.
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from surelab.autodiff import FloatArray, IntArray
from surelab.errors import ConfigError
from surelab.rng import AnySeed, make_rng

SEPARATOR_TOKEN = 0


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 64
    label_budget: int = 32
    classes_per_task: int = 4
    seq_len: int = 32
    """Number of content tokens `T` per sequence."""

    train_per_class: int = 250
    test_per_class: int = 125
    separation: float = 0.4
    """Class-separation `ε`: weight of the class-specific transitions over the shared ones."""

    sparsity: float = 0.1
    """Dirichlet concentration of the class-specific transition rows."""

    def __post_init__(self) -> None:
        for name in [
            "vocab_size",
            "label_budget",
            "classes_per_task",
            "seq_len",
            "train_per_class",
            "test_per_class",
        ]:
            value = getattr(self, name)
            if not (isinstance(value, int) and value >= 1):
                raise ConfigError(f"stream.{name} must be a positive integer. Found: {value!r}")
        if self.n_content < 2:
            raise ConfigError(
                "stream.vocab_size leaves fewer than two content tokens."
                f" Found: {self.vocab_size=}, {self.label_budget=}"
            )
        if not 0.0 <= self.separation <= 1.0:
            raise ConfigError(f"stream.separation must be in [0, 1]. Found: {self.separation}")
        if not self.sparsity > 0.0:
            raise ConfigError(f"stream.sparsity must be positive. Found: {self.sparsity}")

    @property
    def n_content(self) -> int:
        return self.vocab_size - 1 - self.label_budget

    @property
    def content_offset(self) -> int:
        return 1 + self.label_budget

    @property
    def sequence_length(self) -> int:
        return self.seq_len + 2

    def label_token(self, task_index: int, class_index: int) -> int:
        return 1 + task_index * self.classes_per_task + class_index


@dataclass(frozen=True)
class Example:
    """One tokenised sequence: content, separator, label."""

    tokens: tuple[int, ...]
    task_id: int
    class_index: int

    @property
    def label(self) -> int:
        return self.tokens[-1]

    @property
    def label_span(self) -> tuple[int, int]:
        return (len(self.tokens) - 1, len(self.tokens))

    @property
    def full_span(self) -> tuple[int, int]:
        return (1, len(self.tokens))

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.tokens[: self.label_span[0]]

    @property
    def target(self) -> tuple[int, ...]:
        return self.tokens[self.label_span[0] :]


def stack_tokens(examples: Sequence[Example]) -> IntArray:
    return np.array([e.tokens for e in examples], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class TaskData:
    task_id: int
    label_tokens: tuple[int, ...]
    transitions: FloatArray
    """Shape `(classes, n_content, n_content)`; row `i` of class `c` is `p(next | current=i)`."""

    train: tuple[Example, ...]
    test: tuple[Example, ...]


@dataclass(frozen=True, eq=False)
class TaskStream(Sequence[TaskData]):
    spec: SyntheticTaskSpec
    tasks: tuple[TaskData, ...]

    def __getitem__(self, index: int) -> TaskData:  # type: ignore[override]
        return self.tasks[index]

    def __iter__(self) -> Iterator[TaskData]:
        return iter(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def label_tokens(self) -> tuple[int, ...]:
        return tuple(t for task in self.tasks for t in task.label_tokens)

    @property
    def n_train(self) -> int:
        return sum(len(task.train) for task in self.tasks)


def _sample_chains(
    rng: np.random.Generator, transitions: FloatArray, n: int, length: int
) -> IntArray:
    """Sample `n` chains of `length` states, starting uniformly."""
    n_states = transitions.shape[0]
    cumulative = np.cumsum(transitions, axis=1)
    states = np.zeros((n, length), dtype=np.int64)
    states[:, 0] = rng.integers(0, n_states, size=n)
    for t in range(1, length):
        u = rng.random(n)
        nxt = (cumulative[states[:, t - 1]] < u[:, None]).sum(axis=1)
        states[:, t] = np.minimum(nxt, n_states - 1)
    return states


def generate_stream(spec: SyntheticTaskSpec, n_tasks: int, seed: AnySeed) -> TaskStream:
    """Generate `n_tasks` class-disjoint tasks. Equal seeds give identical streams."""
    if n_tasks < 1:
        raise ConfigError(f"Need at least one task. Found: {n_tasks=}")
    if n_tasks * spec.classes_per_task > spec.label_budget:
        raise ConfigError(
            f"{n_tasks} tasks of {spec.classes_per_task} classes need more than"
            f" label_budget={spec.label_budget} label tokens."
        )
    rng = make_rng(seed)
    k = spec.n_content
    shared = rng.dirichlet(np.ones(k), size=k)
    tasks = []
    for task_index in range(n_tasks):
        specific = rng.dirichlet(np.full(k, spec.sparsity), size=(spec.classes_per_task, k))
        transitions = (1.0 - spec.separation) * shared[None] + spec.separation * specific
        transitions /= transitions.sum(axis=-1, keepdims=True)
        labels = tuple(spec.label_token(task_index, c) for c in range(spec.classes_per_task))

        def _split(per_class: int, transitions: FloatArray = transitions) -> tuple[Example, ...]:
            examples = []
            for c in range(spec.classes_per_task):
                chains = _sample_chains(rng, transitions[c], per_class, spec.seq_len)
                for chain in chains + spec.content_offset:
                    tokens = tuple(int(t) for t in chain) + (SEPARATOR_TOKEN, labels[c])
                    examples.append(Example(tokens, task_index, c))
            order = rng.permutation(len(examples))
            return tuple(examples[i] for i in order)

        train = _split(spec.train_per_class)
        test = _split(spec.test_per_class)
        tasks.append(TaskData(task_index, labels, transitions, train, test))
    return TaskStream(spec, tuple(tasks))


def class_log_likelihoods(stream: TaskStream, task_index: int, example: Example) -> FloatArray:
    """Exact log-likelihood of the content of `example` under each class of a task."""
    task = stream[task_index]
    states = np.array(example.prompt[:-1]) - stream.spec.content_offset
    log_transitions = np.log(task.transitions)
    result: FloatArray = log_transitions[:, states[:-1], states[1:]].sum(axis=1)
    return result


def bayes_accuracy(stream: TaskStream, task_index: int, across_tasks: bool = False) -> float:
    """
    Test accuracy of the likelihood-ratio classifier that knows the true transition matrices.

    :param across_tasks: If set, the classifier chooses among the classes of every task in the
        stream, rather than only those of `task_index`.
    """
    candidates = range(len(stream)) if across_tasks else [task_index]
    correct = 0
    test = stream[task_index].test
    for example in test:
        best_label = -1
        best = -np.inf
        for t in candidates:
            ll = class_log_likelihoods(stream, t, example)
            c = int(ll.argmax())
            if ll[c] > best:
                best = float(ll[c])
                best_label = stream[t].label_tokens[c]
        correct += int(best_label == example.label)
    return correct / len(test)
