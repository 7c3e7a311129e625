"""
Seeded, splittable random number generation.

All randomness in `surelab` flows from explicit integer seeds through numpy's counter-based
`Philox` bit generator, so that runs can be reproduced and resumed bit-identically.
"""

from collections.abc import Mapping
from typing import Any, TypeAlias

import numpy as np

AnySeed: TypeAlias = int | np.random.SeedSequence
"""Type alias for anything that can seed a generator."""


def get_seed_sequence(seed: AnySeed) -> np.random.SeedSequence:
    """Get a `SeedSequence` for the given seed-like value."""
    if isinstance(seed, (int, np.integer)):
        assert seed >= 0, f"Seeds must be non-negative. Found: {seed=}"
        seed = np.random.SeedSequence(int(seed))
    if isinstance(seed, np.random.SeedSequence):
        return seed
    raise AssertionError(f"Unknown type of seed: {type(seed)}")


def make_rng(seed: AnySeed) -> np.random.Generator:
    """Create a new generator from `seed`."""
    return np.random.Generator(np.random.Philox(get_seed_sequence(seed)))


def split_rng(seed: AnySeed, n: int) -> list[np.random.Generator]:
    """Create `n` independent generators, all derived from `seed`."""
    return [make_rng(child) for child in get_seed_sequence(seed).spawn(n)]


def _encode(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": [int(v) for v in value.ravel()], "dtype": str(value.dtype)}
    if isinstance(value, Mapping):
        return {k: _encode(v) for k, v in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, Mapping):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: _decode(v) for k, v in value.items()}
    return value


def get_rng_state(rng: np.random.Generator) -> dict[str, Any]:
    """Get the state of `rng` as a JSON-compatible dictionary."""
    result: dict[str, Any] = _encode(rng.bit_generator.state)
    return result


def set_rng_state(rng: np.random.Generator, state: Mapping[str, Any]) -> None:
    """Restore a state previously returned by `get_rng_state`."""
    rng.bit_generator.state = _decode(state)


def restore_rng(state: Mapping[str, Any]) -> np.random.Generator:
    """Create a new generator in the given state."""
    assert state.get("bit_generator") == "Philox", f"Unsupported generator state. Found: {state}"
    rng = np.random.Generator(np.random.Philox(0))
    set_rng_state(rng, state)
    return rng
