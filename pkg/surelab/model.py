"""
A tiny decoder-only transformer with a frozen base and two sets of low-rank adapters.

Every attention layer carries one adapter pair on its query projection and one on its value
projection. The "fast" set is trained, the "slow" set is only ever overwritten (by copying or by an
exponential moving average of the fast set), and the base weights never change after
`init_model`.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray

from surelab.autodiff import FloatArray, GradTape, IntArray, Tensor, log_softmax
from surelab.errors import ConfigError, EmptyDataError, InvalidSequenceError
from surelab.rng import AnySeed, make_rng


class AdapterMode(Enum):
    """Which adapter set, if any, a forward pass uses."""

    NONE = "none"
    FAST = "fast"
    SLOW = "slow"


AnyAdapterMode: TypeAlias = str | AdapterMode
"""Type alias for anything that can be converted to an `AdapterMode`."""


def get_adapter_mode(mode: AnyAdapterMode) -> AdapterMode:
    """Get an `AdapterMode` for the given mode-like value."""
    if isinstance(mode, str):
        return AdapterMode(mode)
    if isinstance(mode, AdapterMode):
        return mode
    raise AssertionError(f"Unknown type of adapter mode: {type(mode)}")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    model_dim: int = 64
    layers: int = 2
    heads: int = 2
    max_seq_len: int = 64
    dropout_rate: float = 0.1
    lora_rank: int = 8
    lora_alpha: float = 32.0
    lora_init_std: float = 0.02
    """Standard deviation of the Gaussian the adapter `A` matrices are drawn from."""

    def __post_init__(self) -> None:
        for name in ["vocab_size", "model_dim", "layers", "heads", "max_seq_len", "lora_rank"]:
            value = getattr(self, name)
            if not (isinstance(value, int) and value >= 1):
                raise ConfigError(f"model.{name} must be a positive integer. Found: {value!r}")
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                "model.model_dim must be divisible by model.heads."
                f" Found: {self.model_dim=}, {self.heads=}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"model.dropout_rate must be in [0, 1). Found: {self.dropout_rate}")
        if not self.lora_alpha > 0.0:
            raise ConfigError(f"model.lora_alpha must be positive. Found: {self.lora_alpha}")
        if not self.lora_init_std > 0.0:
            raise ConfigError(f"model.lora_init_std must be positive. Found: {self.lora_init_std}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass(frozen=True)
class LoraAdapter:
    """A low-rank additive update `ΔW = (α / r) B A` of a `d_out × d_in` weight."""

    a: Tensor
    """Shape `(r, d_in)`."""

    b: Tensor
    """Shape `(d_out, r)`."""

    alpha: float

    def __post_init__(self) -> None:
        assert self.a.shape[0] == self.b.shape[1], (
            "Adapter ranks of A and B disagree." f" Found: {self.a.shape=}, {self.b.shape=}"
        )

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def parameter_count(self) -> int:
        return self.a.size + self.b.size

    def delta(self) -> FloatArray:
        result: FloatArray = self.scale * (self.b.data @ self.a.data)
        return result

    def tensors(self) -> list[Tensor]:
        return [self.a, self.b]


@dataclass(frozen=True)
class AdapterSet(Mapping[str, LoraAdapter]):
    """
    The adapters of one learner, by name (`"blocks.<i>.q"` or `"blocks.<i>.v"`).

    Iteration is in sorted name order.
    """

    adapters: Mapping[str, LoraAdapter]

    def __getitem__(self, key: str) -> LoraAdapter:
        return self.adapters[key]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self.adapters))

    def __len__(self) -> int:
        return len(self.adapters)

    def tensors(self) -> list[Tensor]:
        return [t for name in self for t in self[name].tensors()]

    @property
    def parameter_count(self) -> int:
        return sum(a.parameter_count for a in self.values())

    def copy_from(self, other: AdapterSet) -> None:
        """Overwrite every tensor of this set with the values of `other`."""
        assert list(self) == list(other), f"Adapter sets differ. Found: {list(self)}, {list(other)}"
        for mine, theirs in zip(self.tensors(), other.tensors()):
            mine.assign(theirs.data)


@dataclass(frozen=True)
class BlockWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln2_gain,
            self.ln2_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]


@dataclass(frozen=True)
class BaseWeights:
    token_embedding: Tensor
    position_embedding: Tensor
    blocks: tuple[BlockWeights, ...]
    lnf_gain: Tensor
    lnf_bias: Tensor
    unembedding: Tensor

    def tensors(self) -> list[Tensor]:
        result = [self.token_embedding, self.position_embedding]
        for block in self.blocks:
            result.extend(block.tensors())
        result.extend([self.lnf_gain, self.lnf_bias, self.unembedding])
        return result


@dataclass(frozen=True)
class DualAdapterModel:
    config: ModelConfig
    base: BaseWeights
    fast: AdapterSet
    slow: AdapterSet

    def adapters(self, mode: AnyAdapterMode) -> AdapterSet | None:
        match get_adapter_mode(mode):
            case AdapterMode.NONE:
                return None
            case AdapterMode.FAST:
                return self.fast
            case AdapterMode.SLOW:
                return self.slow
        raise AssertionError(f"Unknown adapter mode: {mode}")

    def tensors(self) -> list[Tensor]:
        """All tensors: base, then fast, then slow."""
        return self.base.tensors() + self.fast.tensors() + self.slow.tensors()

    def adapted_weight(self, name: str) -> Tensor:
        """The base weight an adapter called `name` applies to."""
        prefix, index, projection = name.split(".")
        assert prefix == "blocks" and projection in ("q", "v"), f"Unknown adapter. Found: {name}"
        block = self.base.blocks[int(index)]
        return block.wq if projection == "q" else block.wv


def _frozen(name: str, data: ArrayLike) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=False, name=name)


def init_model(config: ModelConfig, seed: AnySeed) -> DualAdapterModel:
    """
    Create a model with a randomly initialised, frozen base.

    Adapter `A` matrices are Gaussian, `B` matrices are zero, so a fresh model computes exactly the
    same function in every adapter mode. The slow set starts as a copy of the fast set.
    """
    rng = make_rng(seed)
    d = config.model_dim
    v = config.vocab_size

    def _matrix(name: str, d_out: int, d_in: int) -> Tensor:
        return _frozen(name, rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in)))

    blocks = []
    for i in range(config.layers):
        p = f"blocks.{i}"
        blocks.append(
            BlockWeights(
                ln1_gain=_frozen(f"{p}.ln1_gain", np.ones(d)),
                ln1_bias=_frozen(f"{p}.ln1_bias", np.zeros(d)),
                wq=_matrix(f"{p}.wq", d, d),
                wk=_matrix(f"{p}.wk", d, d),
                wv=_matrix(f"{p}.wv", d, d),
                wo=_matrix(f"{p}.wo", d, d),
                ln2_gain=_frozen(f"{p}.ln2_gain", np.ones(d)),
                ln2_bias=_frozen(f"{p}.ln2_bias", np.zeros(d)),
                w1=_matrix(f"{p}.w1", 4 * d, d),
                b1=_frozen(f"{p}.b1", np.zeros(4 * d)),
                w2=_matrix(f"{p}.w2", d, 4 * d),
                b2=_frozen(f"{p}.b2", np.zeros(d)),
            )
        )
    base = BaseWeights(
        token_embedding=_frozen("token_embedding", rng.normal(0.0, 1.0, size=(v, d))),
        position_embedding=_frozen(
            "position_embedding", rng.normal(0.0, 0.1, size=(config.max_seq_len, d))
        ),
        blocks=tuple(blocks),
        lnf_gain=_frozen("lnf_gain", np.ones(d)),
        lnf_bias=_frozen("lnf_bias", np.zeros(d)),
        unembedding=_matrix("unembedding", v, d),
    )

    fast = {}
    slow = {}
    for i in range(config.layers):
        for projection in ("q", "v"):
            name = f"blocks.{i}.{projection}"
            a = rng.normal(0.0, config.lora_init_std, size=(config.lora_rank, d))
            b = np.zeros((d, config.lora_rank))
            fast[name] = LoraAdapter(
                Tensor(a, requires_grad=True, name=f"fast.{name}.a"),
                Tensor(b, requires_grad=True, name=f"fast.{name}.b"),
                config.lora_alpha,
            )
            slow[name] = LoraAdapter(
                Tensor(a, name=f"slow.{name}.a"),
                Tensor(b, name=f"slow.{name}.b"),
                config.lora_alpha,
            )
    return DualAdapterModel(config, base, AdapterSet(fast), AdapterSet(slow))


def check_tokens(config: ModelConfig, tokens: ArrayLike) -> IntArray:
    """Validate a `(batch, length)` array of token ids against `config`."""
    result = np.asarray(tokens)
    if result.ndim == 1:
        result = result[None, :]
    if result.ndim != 2 or result.shape[1] == 0:
        raise InvalidSequenceError(
            f"Expected a non-empty (batch, length) array. Found: {result.shape}"
        )
    if not np.issubdtype(result.dtype, np.integer):
        raise InvalidSequenceError(f"Tokens must be integers. Found: {result.dtype}")
    if result.shape[1] > config.max_seq_len:
        raise InvalidSequenceError(
            f"Sequence of length {result.shape[1]} exceeds max_seq_len={config.max_seq_len}."
        )
    if result.min() < 0 or result.max() >= config.vocab_size:
        raise InvalidSequenceError(
            f"Token ids must lie in [0, {config.vocab_size})."
            f" Found: min={result.min()}, max={result.max()}"
        )
    return result.astype(np.int64)


def _linear(tape: GradTape, x: Tensor, w: Tensor) -> Tensor:
    return tape.matmul(x, tape.transpose(w))


def _projection(tape: GradTape, x: Tensor, w: Tensor, adapter: LoraAdapter | None) -> Tensor:
    out = _linear(tape, x, w)
    if adapter is None:
        return out
    low_rank = _linear(tape, _linear(tape, x, adapter.a), adapter.b)
    return tape.add(out, tape.scale(low_rank, adapter.scale))


def model_logits(
    tape: GradTape,
    model: DualAdapterModel,
    tokens: ArrayLike,
    mode: AnyAdapterMode,
    *,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """
    Per-position next-token logits, shape `(batch, length, vocab)`.

    Dropout is only applied when `train` is set, in which case `rng` is required.
    """
    config = model.config
    ids = check_tokens(config, tokens)
    batch, length = ids.shape
    adapters = model.adapters(mode)
    assert not train or rng is not None, "Training forward passes need an rng for dropout."
    rate = config.dropout_rate if train else 0.0

    def _dropout(x: Tensor) -> Tensor:
        if rate == 0.0:
            return x
        assert rng is not None
        return tape.dropout(x, rate, rng)

    heads, head_dim = config.heads, config.head_dim
    causal = np.tril(np.ones((length, length), dtype=bool))
    x = tape.add(
        tape.embedding(model.base.token_embedding, ids),
        tape.embedding(model.base.position_embedding, np.arange(length)),
    )
    x = _dropout(x)
    for i, block in enumerate(model.base.blocks):
        h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias)
        q = _projection(tape, h, block.wq, None if adapters is None else adapters[f"blocks.{i}.q"])
        k = _linear(tape, h, block.wk)
        v = _projection(tape, h, block.wv, None if adapters is None else adapters[f"blocks.{i}.v"])

        def _heads(t: Tensor) -> Tensor:
            return tape.transpose(tape.reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

        scores = tape.scale(tape.matmul(_heads(q), tape.transpose(_heads(k))), head_dim**-0.5)
        attended = tape.matmul(tape.softmax(scores, causal), _heads(v))
        merged = tape.reshape(
            tape.transpose(attended, (0, 2, 1, 3)), (batch, length, config.model_dim)
        )
        x = tape.add(x, _dropout(_linear(tape, merged, block.wo)))

        h = tape.layer_norm(x, block.ln2_gain, block.ln2_bias)
        hidden = tape.gelu(tape.add(_linear(tape, h, block.w1), block.b1))
        x = tape.add(x, _dropout(tape.add(_linear(tape, hidden, block.w2), block.b2)))

    x = tape.layer_norm(x, model.base.lnf_gain, model.base.lnf_bias)
    return _linear(tape, x, model.base.unembedding)


def forward_logits(
    model: DualAdapterModel, tokens: Sequence[int] | IntArray, mode: AnyAdapterMode
) -> FloatArray:
    """Evaluation-mode logits of a single sequence, shape `(length, vocab)`."""
    logits = model_logits(GradTape(record=False), model, np.asarray(tokens)[None, :], mode)
    result: FloatArray = logits.data[0]
    return result


def span_mask(length: int, spans: Sequence[tuple[int, int]]) -> NDArray[np.bool_]:
    """
    Boolean `(batch, length)` mask of target positions.

    A span `(start, stop)` selects the tokens at positions `start <= t < stop`, each predicted from
    the logits at position `t - 1`.
    """
    mask = np.zeros((len(spans), length), dtype=bool)
    for row, (start, stop) in enumerate(spans):
        if stop <= start:
            raise EmptyDataError(f"Empty target span. Found: {(start, stop)}")
        if start < 1 or stop > length:
            raise InvalidSequenceError(
                f"Target span {(start, stop)} must lie within [1, {length}]."
            )
        mask[row, start:stop] = True
    return mask


def batch_nll(
    model: DualAdapterModel,
    tokens: ArrayLike,
    spans: Sequence[tuple[int, int]],
    mode: AnyAdapterMode,
    chunk_size: int = 256,
) -> tuple[FloatArray, IntArray]:
    """
    Evaluation-mode negative log-likelihood of the target span of every sequence.

    Returns per-sequence totals (in nats) and token counts.
    """
    ids = check_tokens(model.config, tokens)
    if len(spans) != ids.shape[0]:
        raise InvalidSequenceError(f"Got {len(spans)} spans for {ids.shape[0]} sequences.")
    mask = span_mask(ids.shape[1], spans)
    totals = np.zeros(ids.shape[0])
    for start in range(0, ids.shape[0], chunk_size):
        chunk = ids[start : start + chunk_size]
        logits = model_logits(GradTape(record=False), model, chunk, mode).data
        log_probs = log_softmax(logits[:, :-1])
        # token_log_probs[b, t] = log p(z_{t+1} | z_{<=t})
        token_log_probs = np.take_along_axis(log_probs, chunk[:, 1:, None], axis=-1)[..., 0]
        chunk_mask = mask[start : start + chunk_size, 1:]
        totals[start : start + chunk_size] = -(token_log_probs * chunk_mask).sum(axis=1)
    return totals, mask.sum(axis=1).astype(np.int64)


def sequence_nll(
    model: DualAdapterModel,
    tokens: Sequence[int] | IntArray,
    span: tuple[int, int],
    mode: AnyAdapterMode,
) -> tuple[float, int]:
    """`-Σ_t log p(z_t | z_<t)` over the target span of one sequence, and the span length."""
    totals, counts = batch_nll(model, np.asarray(tokens)[None, :], [span], mode)
    return float(totals[0]), int(counts[0])


def greedy_decode(
    model: DualAdapterModel,
    prompts: ArrayLike,
    n_tokens: int,
    mode: AnyAdapterMode,
    allowed: Sequence[int] | None = None,
) -> IntArray:
    """
    Greedily extend every prompt by `n_tokens` tokens.

    :param allowed: If given, only these token ids can be produced.
    """
    ids = check_tokens(model.config, prompts)
    result = np.zeros((ids.shape[0], n_tokens), dtype=np.int64)
    penalty = None
    if allowed is not None:
        penalty = np.full(model.config.vocab_size, -np.inf)
        penalty[np.asarray(allowed, dtype=np.int64)] = 0.0
    for i in range(n_tokens):
        logits = model_logits(GradTape(record=False), model, ids, mode).data[:, -1]
        if penalty is not None:
            logits = logits + penalty
        result[:, i] = logits.argmax(axis=-1)
        ids = np.concatenate([ids, result[:, i : i + 1]], axis=1)
    return result


def merged_weight(model: DualAdapterModel, name: str, mode: AnyAdapterMode) -> FloatArray:
    """`W + (α / r) B A` for the adapter `name` of the given set."""
    weight = model.adapted_weight(name).data
    adapters = model.adapters(mode)
    if adapters is None:
        return weight.copy()
    result: FloatArray = weight + adapters[name].delta()
    return result


def copy_fast_to_slow(model: DualAdapterModel) -> None:
    """Set `θ_slow := θ_fast`."""
    model.slow.copy_from(model.fast)
