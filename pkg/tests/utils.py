from __future__ import annotations

from collections.abc import Sequence
from dataclasses import asdict
from typing import Any

import numpy as np

from surelab import (
    DualAdapterModel,
    Example,
    ExperimentConfig,
    Method,
    ModelConfig,
    RunConfig,
    SgdConfig,
    SyntheticTaskSpec,
    TaskStream,
    TrainSchedule,
    generate_stream,
    init_model,
    parse_config,
)
from surelab.surprise import SurpriseScore, SurpriseVariant

FAKE_MODEL = ModelConfig(
    vocab_size=16,
    model_dim=8,
    layers=1,
    heads=2,
    max_seq_len=12,
    dropout_rate=0.0,
    lora_rank=2,
    lora_alpha=4.0,
)

FAKE_SPEC = SyntheticTaskSpec(
    vocab_size=16,
    label_budget=6,
    classes_per_task=2,
    seq_len=6,
    train_per_class=8,
    test_per_class=4,
)


def fake_model(
    *, config: ModelConfig = FAKE_MODEL, seed: int = 0, b_scale: float = 0.0
) -> DualAdapterModel:
    """A tiny model. With `b_scale` the fast adapter `B` matrices are randomised."""
    model = init_model(config, seed)
    if b_scale:
        rng = np.random.default_rng(seed + 1)
        for adapter in model.fast.values():
            adapter.b.assign(rng.normal(0.0, b_scale, size=adapter.b.shape))
    return model


def fake_stream(*, n_tasks: int = 3, seed: int = 0) -> TaskStream:
    return generate_stream(FAKE_SPEC, n_tasks, seed)


def fake_example(
    *,
    tokens: Sequence[int] = (8, 9, 10, 11, 0, 1),
    task_id: int = 0,
    class_index: int = 0,
) -> Example:
    return Example(tuple(tokens), task_id, class_index)


def fake_examples(n: int, *, task_id: int = 0) -> list[Example]:
    """`n` distinct examples of one task."""
    return [
        fake_example(tokens=(7 + i % 9, 7 + (i // 9) % 9, 10, 0, 1), task_id=task_id)
        for i in range(n)
    ]


def fake_scores(values: Sequence[float], *, scored_at: int = 0) -> list[SurpriseScore]:
    return [SurpriseScore(float(v), SurpriseVariant.AVG_SEQUENCE, 1, scored_at) for v in values]


def fake_run_config(
    *,
    method: Method = Method.SLOW_SURPRISE,
    n_tasks: int = 3,
    order: tuple[int, ...] | None = None,
    buffer_size: int | None = 6,
    seed: int = 0,
    **schedule: object,
) -> RunConfig:
    settings: dict[str, object] = {
        "batch_size": 4,
        "replay_batch": 2,
        "replay_interval": 2,
        "beta": 0.9,
        "sgd": SgdConfig(learning_rate=0.05),
    }
    settings.update(schedule)
    return RunConfig(
        model=FAKE_MODEL,
        schedule=TrainSchedule(method=method, seed=seed, **settings),  # type: ignore[arg-type]
        stream=FAKE_SPEC,
        n_tasks=n_tasks,
        order=order,
        buffer_size=buffer_size,
    )


def fake_experiment_config(**grid: Any) -> ExperimentConfig:
    """A two-task experiment small enough to run in a test. Keyword arguments fill `[grid]`."""
    return parse_config(
        {
            "model": asdict(FAKE_MODEL),
            "schedule": {"batch_size": 4, "replay_batch": 2, "replay_interval": 2, "beta": 0.9},
            "sgd": {"learning_rate": 0.05},
            "buffer": {"size": 6},
            "stream": {**asdict(FAKE_SPEC), "n_tasks": 2},
            "grid": grid,
            "run": {"workers": 2},
        }
    )
