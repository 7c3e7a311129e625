from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import TypeAlias

import numpy as np

from surelab.errors import NonFiniteError
from surelab.model import AdapterMode, AnyAdapterMode, DualAdapterModel, batch_nll
from surelab.tasks import Example, stack_tokens


class SurpriseVariant(Enum):
    """How the negative log-likelihood of a sequence is reduced to one score."""

    AVG_SEQUENCE = "avg_sequence"
    """Mean NLL per token over the full sequence."""

    SUM_SEQUENCE = "sum_sequence"
    """Total NLL over the full sequence."""

    LABEL_ONLY = "label_only"
    """Mean NLL per token over the label tokens only."""


AnySurpriseVariant: TypeAlias = str | SurpriseVariant
"""Type alias for anything that can be converted to a `SurpriseVariant`."""


def get_surprise_variant(variant: AnySurpriseVariant) -> SurpriseVariant:
    """Get a `SurpriseVariant` for the given variant-like value."""
    if isinstance(variant, str):
        return SurpriseVariant(variant)
    if isinstance(variant, SurpriseVariant):
        return variant
    raise AssertionError(f"Unknown type of surprise variant: {type(variant)}")


@dataclass(frozen=True)
class SurpriseScore:
    value: float
    variant: SurpriseVariant
    token_count: int
    scored_at: int
    """Global training step at which the score was computed."""


def _span(example: Example, variant: SurpriseVariant) -> tuple[int, int]:
    if variant == SurpriseVariant.LABEL_ONLY:
        return example.label_span
    return example.full_span


def score_batch(
    model: DualAdapterModel,
    examples: Sequence[Example],
    variant: AnySurpriseVariant = SurpriseVariant.AVG_SEQUENCE,
    mode: AnyAdapterMode = AdapterMode.FAST,
    scored_at: int = 0,
) -> list[SurpriseScore]:
    """
    Score every example by the negative log-likelihood the model assigns to it.

    Scoring never samples dropout, so it is a pure function of the model weights and the tokens.
    """
    if not examples:
        return []
    variant = get_surprise_variant(variant)
    spans = [_span(e, variant) for e in examples]
    totals, counts = batch_nll(model, stack_tokens(examples), spans, mode)
    if variant == SurpriseVariant.SUM_SEQUENCE:
        values = totals
    else:
        values = totals / counts
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("surprise", f"{int((~np.isfinite(values)).sum())} scores.")
    return [
        SurpriseScore(float(v), variant, int(c), scored_at)
        for v, c in zip(values, counts, strict=True)
    ]


def score(
    model: DualAdapterModel,
    example: Example,
    variant: AnySurpriseVariant = SurpriseVariant.AVG_SEQUENCE,
    mode: AnyAdapterMode = AdapterMode.FAST,
    scored_at: int = 0,
) -> SurpriseScore:
    (result,) = score_batch(model, [example], variant, mode, scored_at)
    return result


@dataclass(frozen=True)
class TopK:
    indices: tuple[int, ...]
    """Selected indices, most surprising first."""

    truncated: bool
    """Whether fewer than the requested number of items were available."""


def rank_top_k(values: Sequence[float], k: int) -> TopK:
    """
    Select the indices of the `k` largest values.

    Ties are broken by index, lowest first, so the result is deterministic.
    """
    assert k >= 0, f"Cannot select a negative number of items. Found: {k=}"
    array = np.asarray(values, dtype=np.float64)
    # lexsort uses the last key as the primary one.
    order = np.lexsort((np.arange(len(array)), -array))
    return TopK(tuple(int(i) for i in order[:k]), k > len(array))
