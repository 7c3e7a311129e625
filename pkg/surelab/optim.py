import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from surelab.autodiff import FloatArray, Tensor
from surelab.errors import ConfigError

_LOG = logging.getLogger(__name__)


@dataclass(frozen=True)
class SgdConfig:
    """Plain stochastic gradient descent."""

    learning_rate: float = 1e-3
    clip_norm: float | None = None
    """If set, gradients are rescaled so their global L2 norm is at most this."""

    def __post_init__(self) -> None:
        if not self.learning_rate > 0.0:
            raise ConfigError(f"Learning rate must be positive. Found: {self.learning_rate=}")
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise ConfigError(f"Clip norm must be positive. Found: {self.clip_norm=}")


@dataclass
class SgdStats:
    steps: int = 0
    rejected_steps: int = 0


def global_norm(gradients: Sequence[FloatArray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in gradients)))


def sgd_step(
    params: Sequence[Tensor],
    gradients: Mapping[Tensor, FloatArray],
    config: SgdConfig,
    stats: SgdStats | None = None,
) -> bool:
    """
    Apply `θ ← θ - η g` to every trainable tensor in `params`.

    Tensors with `requires_grad == False` are never touched. If any gradient is non-finite, no
    tensor is updated, the rejection is counted in `stats`, and `False` is returned.
    """
    trainable = [p for p in params if p.requires_grad]
    for p in trainable:
        g = gradients[p]
        assert g.shape == p.shape, f"Gradient shape mismatch for {p.name!r}. Found: {g.shape=}"
        if not np.all(np.isfinite(g)):
            if stats is not None:
                stats.rejected_steps += 1
            _LOG.warning("Rejected SGD step: non-finite gradient for %r.", p.name)
            return False

    factor = config.learning_rate
    if config.clip_norm is not None:
        norm = global_norm([gradients[p] for p in trainable])
        if norm > config.clip_norm:
            factor *= config.clip_norm / norm

    for p in trainable:
        p.assign(p.data - factor * gradients[p])
    if stats is not None:
        stats.steps += 1
    return True
