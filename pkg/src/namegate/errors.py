"""Exception types shared across the toolkit.

Grouping them under one root lets the CLI map failures onto its exit-code
contract (2 config, 3 I/O and file formats, 4 numeric failures).
"""


class NamegateError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(NamegateError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateVectorError(NamegateError):
    """A row to be normalized has (near) zero norm."""


class NumericError(NamegateError):
    """A computation produced non-finite values or diverged."""


class TapeStateError(NamegateError):
    """Gradient tape used out of order, e.g. backward before any forward."""


class EmptyInputError(NamegateError):
    """An operation requiring at least one element received none."""


class FormatError(NamegateError):
    """A binary embedding file violates the EMB1 format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(NamegateError):
    """A dataset or prompt manifest failed validation."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InsufficientSpeakersError(NamegateError):
    """Cross-validation requires more speakers than the dataset provides."""


class UnknownPromptError(NamegateError):
    """A file-backed text provider has no vector for the requested prompt."""


class BatchTooSmallError(NamegateError):
    """Batch statistics require at least two rows."""


class InfeasibleAlignmentError(NamegateError):
    """The target sequence cannot be aligned within the given frame count."""


class UndefinedWerError(NamegateError):
    """Word error rate is undefined for an empty reference."""


class TrainingDivergedError(NumericError):
    """Gradients became non-finite during optimization."""


class ConfigError(NamegateError):
    """A run configuration is malformed or inconsistent."""


class StateError(NamegateError):
    """An operation was invoked without required prior state."""


class ConsistencyError(NamegateError):
    """Inputs that must describe the same recordings disagree."""
