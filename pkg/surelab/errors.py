class SurelabError(Exception):
    """Base class of all errors raised deliberately by `surelab`."""


class ConfigError(SurelabError):
    """An experiment or component configuration is invalid."""


class ShapeError(SurelabError):
    """Tensor shapes do not match what an operation requires."""


class NonFiniteError(SurelabError):
    """A forward pass produced a non-finite value."""

    def __init__(self, op: str, message: str) -> None:
        super().__init__(f"Non-finite value in {op!r}: {message}")
        self.op = op


class TapeError(SurelabError):
    """A gradient tape was used in an invalid state."""


class EmptyDataError(SurelabError):
    """An operation needs data, but got none."""


class PolicyError(SurelabError):
    """A replay memory operation does not match the memory's policy."""


class IncompleteMatrixError(SurelabError):
    """An accuracy matrix lacks the entries a metric needs."""


class CheckpointError(SurelabError):
    """A checkpoint cannot be written or read."""


class CorruptCheckpointError(CheckpointError):
    """A checkpoint file failed its integrity check."""


class ConfigMismatchError(CheckpointError):
    """A checkpoint was written for a different experiment configuration."""


class InvalidSequenceError(SurelabError):
    """A token sequence does not fit the model: unknown tokens, too long, or a bad span."""
