import numpy as np
import pytest

from surelab import (
    AdapterMode,
    DualAdapterModel,
    SurpriseVariant,
    get_surprise_variant,
    rank_top_k,
    score,
    score_batch,
    sequence_nll,
)
from tests.utils import FAKE_MODEL, fake_example, fake_examples, fake_model


def test_score__avg_sequence() -> None:
    model = fake_model(b_scale=0.5)
    example = fake_example()
    total, count = sequence_nll(model, example.tokens, example.full_span, AdapterMode.FAST)

    result = score(model, example, scored_at=7)

    assert SurpriseVariant.AVG_SEQUENCE == result.variant
    assert 5 == result.token_count
    assert 7 == result.scored_at
    assert total / count == pytest.approx(result.value, rel=1e-12)


def _fixed_next_token_model(p: np.ndarray) -> DualAdapterModel:
    """A model whose next-token distribution is `p` at every position."""
    model = fake_model(b_scale=0.5)
    d = FAKE_MODEL.model_dim
    model.base.lnf_gain.assign(np.zeros(d))
    model.base.lnf_bias.assign(np.eye(d)[0])
    unembedding = np.zeros((FAKE_MODEL.vocab_size, d))
    unembedding[:, 0] = np.log(p)
    model.base.unembedding.assign(unembedding)
    return model


def test_score__hand_computed() -> None:
    p = np.full(FAKE_MODEL.vocab_size, 0.25 / 14)
    p[3], p[4] = 0.5, 0.25
    model = _fixed_next_token_model(p)
    example = fake_example(tokens=(9, 3, 4))

    assert (np.log(2) + np.log(4)) / 2 == pytest.approx(score(model, example).value, rel=1e-12)
    assert np.log(8) == pytest.approx(score(model, example, "sum_sequence").value, rel=1e-12)
    assert np.log(4) == pytest.approx(score(model, example, "label_only").value, rel=1e-12)


def test_score__variants() -> None:
    model = fake_model(b_scale=0.5)
    example = fake_example()

    avg = score(model, example, "avg_sequence")
    total = score(model, example, "sum_sequence")
    label = score(model, example, "label_only")

    assert avg.value * avg.token_count == pytest.approx(total.value, rel=1e-12)
    assert 1 == label.token_count
    label_total, _ = sequence_nll(model, example.tokens, example.label_span, AdapterMode.FAST)
    assert label_total == pytest.approx(label.value, rel=1e-12)


def test_score__adapter_mode() -> None:
    model = fake_model(b_scale=0.5)
    example = fake_example()

    fast = score(model, example, mode=AdapterMode.FAST)
    slow = score(model, example, mode="slow")
    none = score(model, example, mode=AdapterMode.NONE)

    assert fast.value != slow.value
    assert none.value == slow.value


def test_score_batch() -> None:
    model = fake_model(b_scale=0.5)
    examples = fake_examples(5)

    batch = score_batch(model, examples)

    assert [score(model, e) for e in examples] == batch
    assert batch == score_batch(model, examples)
    assert all(s.value > 0.0 for s in batch)


def test_score_batch__empty() -> None:
    assert [] == score_batch(fake_model(), [])


@pytest.mark.parametrize(
    "variant,expected",
    [
        ("avg_sequence", SurpriseVariant.AVG_SEQUENCE),
        ("label_only", SurpriseVariant.LABEL_ONLY),
        (SurpriseVariant.SUM_SEQUENCE, SurpriseVariant.SUM_SEQUENCE),
    ],
)
def test_get_surprise_variant(variant: str | SurpriseVariant, expected: SurpriseVariant) -> None:
    assert expected == get_surprise_variant(variant)


def test_get_surprise_variant__unknown() -> None:
    with pytest.raises(ValueError):
        get_surprise_variant("max_token")


@pytest.mark.parametrize(
    "values,k,expected,truncated",
    [
        ([0.1, 0.5, 0.3], 2, (1, 2), False),
        ([0.5, 0.1, 0.5, 0.5], 2, (0, 2), False),
        ([0.5, 0.1, 0.5, 0.5], 3, (0, 2, 3), False),
        ([2.0, 1.0], 5, (0, 1), True),
        ([2.0, 1.0], 0, (), False),
        ([], 1, (), True),
    ],
)
def test_rank_top_k(
    values: list[float], k: int, expected: tuple[int, ...], truncated: bool
) -> None:
    result = rank_top_k(values, k)

    assert expected == result.indices
    assert truncated == result.truncated


def test_rank_top_k__matches_full_sort() -> None:
    values = np.random.default_rng(0).random(1000)

    result = rank_top_k(values.tolist(), 10)

    assert tuple(int(i) for i in np.argsort(-values)[:10]) == result.indices
    assert not result.truncated
