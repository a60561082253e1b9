"""Exception types raised across the package."""


class HKTError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HKTError, ValueError):
    """Tensor shapes do not satisfy an operation's requirements."""


class ValidationError(HKTError, ValueError):
    """An argument value is outside its valid domain."""


class UsageError(HKTError, RuntimeError):
    """An API was called in an invalid state."""


class NumericError(HKTError, ArithmeticError):
    """A computation produced a non-finite value."""


class OrderingError(UsageError):
    """A stage activation was requested before it was computed."""


class ConfigError(HKTError, ValueError):
    """An experiment configuration is invalid."""

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class TrainingAborted(HKTError, RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, step, losses):
        self.step = step
        self.losses = dict(losses)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.losses.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class CheckpointError(HKTError, IOError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """The file is not a checkpoint (bad magic or malformed header)."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint ends before its declared contents."""


class CheckpointShapeError(CheckpointError):
    """A stored array disagrees with the declared architecture."""


class IngestionError(HKTError, IOError):
    """Base class for dataset ingestion failures."""


class MissingFileError(IngestionError, FileNotFoundError):
    """A required dataset file is absent."""


class FileLengthError(IngestionError):
    """A dataset file has the wrong byte length."""


class LabelRangeError(IngestionError):
    """A dataset label falls outside the class range."""
