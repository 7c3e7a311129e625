"""
Replay memory.

Three admission policies are supported:

* `reservoir`: classic reservoir sampling over every example ever offered.
* `surprise`: an equal per-task quota `⌊S/d⌋`, filled with the most surprising candidates of each
  task and trimmed by evicting the least surprising ones when a new task arrives.
* `random`: the same per-task quota, filled and trimmed uniformly at random.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum
from typing import TypeAlias

import numpy as np

from surelab.errors import ConfigError, EmptyDataError, PolicyError
from surelab.model import AdapterMode, DualAdapterModel
from surelab.surprise import (
    AnySurpriseVariant,
    SurpriseScore,
    SurpriseVariant,
    rank_top_k,
    score_batch,
)
from surelab.tasks import Example

_LOG = logging.getLogger(__name__)


class BufferPolicy(Enum):
    RESERVOIR = "reservoir"
    SURPRISE = "surprise"
    RANDOM = "random"

    @property
    def uses_quota(self) -> bool:
        return self != BufferPolicy.RESERVOIR


AnyBufferPolicy: TypeAlias = str | BufferPolicy
"""Type alias for anything that can be converted to a `BufferPolicy`."""


def get_buffer_policy(policy: AnyBufferPolicy) -> BufferPolicy:
    """Get a `BufferPolicy` for the given policy-like value."""
    if isinstance(policy, str):
        return BufferPolicy(policy)
    if isinstance(policy, BufferPolicy):
        return policy
    raise AssertionError(f"Unknown type of buffer policy: {type(policy)}")


class BufferTiming(Enum):
    """When candidates of a task are scored and inserted, relative to training on that task."""

    SB_UB = "sb-ub"
    """Score before, update before."""

    SB_UA = "sb-ua"
    """Score before, update after."""

    SA_UA = "sa-ua"
    """Score after, update after."""

    ONLINE = "online"
    """Insert every example as it streams past. Reservoir policy only."""

    @property
    def scores_before(self) -> bool:
        return self in (BufferTiming.SB_UB, BufferTiming.SB_UA)

    @property
    def inserts_before(self) -> bool:
        return self == BufferTiming.SB_UB


AnyBufferTiming: TypeAlias = str | BufferTiming
"""Type alias for anything that can be converted to a `BufferTiming`."""


def get_buffer_timing(timing: AnyBufferTiming) -> BufferTiming:
    """Get a `BufferTiming` for the given timing-like value."""
    if isinstance(timing, str):
        return BufferTiming(timing)
    if isinstance(timing, BufferTiming):
        return timing
    raise AssertionError(f"Unknown type of buffer timing: {type(timing)}")


@dataclass(frozen=True)
class BufferEntry:
    example: Example
    score: SurpriseScore | None
    inserted_at: int

    @property
    def task_id(self) -> int:
        return self.example.task_id

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.example.tokens


def _score_value(entry: BufferEntry) -> float:
    assert entry.score is not None, f"Entry has no surprise score. Found: {entry.task_id=}"
    return entry.score.value


@dataclass(frozen=True)
class ReplayBatch:
    indices: tuple[int, ...]
    """Positions of the drawn entries in the memory."""

    entries: tuple[BufferEntry, ...]
    empty: bool
    """Set if a draw was requested from an empty memory."""

    @property
    def examples(self) -> list[Example]:
        return [e.example for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class QuotaUpdate:
    task_id: int
    quota: int
    stored: int
    shortfall: int


class ReplayMemory:
    """
    A bounded memory of past examples.

    The memory has exactly one writer, the trainer. `entries` is a tuple snapshot, so readers never
    observe a half-applied update.
    """

    def __init__(
        self,
        capacity: int,
        policy: AnyBufferPolicy,
        timing: AnyBufferTiming = BufferTiming.SB_UB,
        aging: bool = False,
    ) -> None:
        self.policy = get_buffer_policy(policy)
        self.timing = get_buffer_timing(timing)
        if not (isinstance(capacity, int) and capacity >= 1):
            raise ConfigError(f"Buffer capacity must be a positive integer. Found: {capacity=}")
        if self.timing == BufferTiming.ONLINE and self.policy != BufferPolicy.RESERVOIR:
            raise ConfigError(f"Online timing requires the reservoir policy. Found: {self.policy}")
        if aging and self.policy != BufferPolicy.SURPRISE:
            raise ConfigError(f"Aging requires the surprise policy. Found: {self.policy}")
        self.capacity = capacity
        self.aging = aging
        self._entries: list[BufferEntry] = []
        self.seen: dict[int, int] = {}
        self.shortfalls: dict[int, int] = {}

    @property
    def entries(self) -> tuple[BufferEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def n_seen(self) -> int:
        return sum(self.seen.values())

    def task_counts(self) -> dict[int, int]:
        result: dict[int, int] = {}
        for e in self._entries:
            result[e.task_id] = result.get(e.task_id, 0) + 1
        return dict(sorted(result.items()))

    def restore(
        self,
        entries: Sequence[BufferEntry],
        seen: dict[int, int],
        shortfalls: dict[int, int],
    ) -> None:
        """Replace the complete contents, as when loading a checkpoint."""
        assert len(entries) <= self.capacity, f"Too many entries. Found: {len(entries)=}"
        self._entries = list(entries)
        self.seen = dict(seen)
        self.shortfalls = dict(shortfalls)

    def _require(self, *policies: BufferPolicy) -> None:
        if self.policy not in policies:
            raise PolicyError(
                f"Operation needs policy {[p.value for p in policies]}. Found: {self.policy.value}"
            )

    def reservoir_update(self, example: Example, rng: np.random.Generator, step: int = 0) -> None:
        """Offer one example to a reservoir memory (Vitter's algorithm R)."""
        self._require(BufferPolicy.RESERVOIR)
        self.seen[example.task_id] = self.seen.get(example.task_id, 0) + 1
        n = self.n_seen
        entry = BufferEntry(example, None, step)
        if len(self._entries) < self.capacity:
            self._entries.append(entry)
            return
        j = int(rng.integers(0, n))
        if j < self.capacity:
            self._entries[j] = entry

    def _begin_quota_update(self, task_id: int, n_candidates: int) -> int:
        self.seen[task_id] = self.seen.get(task_id, 0) + n_candidates
        # A task that is inserted twice replaces its previous entries.
        self._entries = [e for e in self._entries if e.task_id != task_id]
        tasks = {e.task_id for e in self._entries} | {task_id}
        return self.capacity // len(tasks)

    def _finish_quota_update(self, task_id: int, quota: int, new: list[BufferEntry]) -> QuotaUpdate:
        self._entries.extend(new)
        shortfall = quota - len(new)
        if shortfall > 0:
            self.shortfalls[task_id] = shortfall
            _LOG.warning(
                "Task %d offered only %d candidates for a quota of %d.", task_id, len(new), quota
            )
        assert len(self._entries) <= self.capacity, f"Capacity exceeded. Found: {len(self)=}"
        return QuotaUpdate(task_id, quota, len(new), max(shortfall, 0))

    def surprise_task_update(
        self,
        task_id: int,
        candidates: Sequence[Example],
        scores: Sequence[SurpriseScore],
        step: int = 0,
    ) -> QuotaUpdate:
        """
        Admit the most surprising candidates of a new task under the per-task quota.

        Every previously stored task is trimmed to the new quota by evicting its least surprising
        entries. Equal scores keep the entry stored first.
        """
        self._require(BufferPolicy.SURPRISE)
        if len(candidates) != len(scores):
            raise EmptyDataError(f"Got {len(scores)} scores for {len(candidates)} candidates.")
        quota = self._begin_quota_update(task_id, len(candidates))

        keep: set[int] = set()
        for t in sorted({e.task_id for e in self._entries}):
            positions = [i for i, e in enumerate(self._entries) if e.task_id == t]
            values = [_score_value(self._entries[i]) for i in positions]
            keep.update(positions[j] for j in rank_top_k(values, quota).indices)
        self._entries = [e for i, e in enumerate(self._entries) if i in keep]

        top = rank_top_k([s.value for s in scores], quota)
        new = [BufferEntry(candidates[i], scores[i], step) for i in top.indices]
        return self._finish_quota_update(task_id, quota, new)

    def random_task_update(
        self,
        task_id: int,
        candidates: Sequence[Example],
        rng: np.random.Generator,
        step: int = 0,
    ) -> QuotaUpdate:
        """Admit a uniformly random subset of a new task under the per-task quota."""
        self._require(BufferPolicy.RANDOM)
        quota = self._begin_quota_update(task_id, len(candidates))

        keep: set[int] = set()
        for t in sorted({e.task_id for e in self._entries}):
            positions = [i for i, e in enumerate(self._entries) if e.task_id == t]
            if len(positions) > quota:
                positions = [int(i) for i in rng.choice(positions, size=quota, replace=False)]
            keep.update(positions)
        self._entries = [e for i, e in enumerate(self._entries) if i in keep]

        chosen = rng.permutation(len(candidates))[:quota]
        new = [BufferEntry(candidates[int(i)], None, step) for i in chosen]
        return self._finish_quota_update(task_id, quota, new)

    def sample_replay_batch(self, size: int, rng: np.random.Generator) -> ReplayBatch:
        """Draw `min(size, len(self))` entries uniformly without replacement."""
        assert size >= 0, f"Replay batch size must be non-negative. Found: {size=}"
        if size == 0:
            return ReplayBatch((), (), False)
        if not self._entries:
            _LOG.warning("Replay requested from an empty memory.")
            return ReplayBatch((), (), True)
        k = min(size, len(self._entries))
        indices = tuple(int(i) for i in rng.choice(len(self._entries), size=k, replace=False))
        return ReplayBatch(indices, tuple(self._entries[i] for i in indices), False)

    def rescore_on_replay(
        self,
        model: DualAdapterModel,
        batch: ReplayBatch,
        variant: AnySurpriseVariant = SurpriseVariant.AVG_SEQUENCE,
        step: int = 0,
    ) -> None:
        """Replace the scores of replayed entries by their current surprise under `θ_fast`."""
        if not self.aging:
            _LOG.warning("Rescoring requested on a memory without aging. Ignoring.")
            return
        if not batch.entries:
            return
        scores = score_batch(model, batch.examples, variant, AdapterMode.FAST, step)
        for i, entry, new_score in zip(batch.indices, batch.entries, scores, strict=True):
            assert self._entries[i] is entry, f"Memory changed since the draw. Found: {i=}"
            self._entries[i] = replace(entry, score=new_score)

    def export_rows(self) -> list[tuple[int, float | None, str]]:
        """`(task_id, score, tokens)` rows, in storage order, for inspection."""
        return [
            (
                e.task_id,
                e.score.value if e.score is not None else None,
                " ".join(str(t) for t in e.tokens),
            )
            for e in self._entries
        ]
