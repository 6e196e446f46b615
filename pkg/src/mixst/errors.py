"""Exception hierarchy shared by every mixst module."""


class MixstError(Exception):
    """Base class for all package errors."""


class DimensionError(MixstError, ValueError):
    """Tensor/matrix shapes are incompatible for the requested operation."""


class ConfigurationError(MixstError, ValueError):
    """A hyperparameter or config field is invalid."""


class ValidationError(MixstError, ValueError):
    """Input data violates a documented precondition."""


class ContractError(MixstError, RuntimeError):
    """An internal API contract was violated (e.g. non-scalar loss, stale cache)."""


class DeterminismError(MixstError, RuntimeError):
    """A function expected to be deterministic returned differing values."""


class InputTooShortError(ValidationError):
    """Sequence shorter than the architecture's minimum length."""

    def __init__(self, length: int, minimum: int):
        super().__init__(f"input length {length} is shorter than the minimum {minimum}")
        self.length = length
        self.minimum = minimum


class DivergenceError(MixstError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CorpusFormatError(MixstError, ValueError):
    """A corpus file on disk is malformed; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(MixstError, ValueError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint manifest or blob is corrupt."""


class CheckpointShapeError(CheckpointError):
    """Stored tensor shapes disagree with the manifest config."""
