"""Exception taxonomy shared across the package.

Each class maps to one failure category so callers (and the CLI exit-code
mapping) can distinguish programming mistakes from bad data or bad configs.
"""


class HistmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HistmError):
    """Array shapes are inconsistent with an operation's contract."""


class ConfigurationError(HistmError):
    """A configuration value is invalid (e.g. even kernel extent)."""


class UsageError(HistmError):
    """An API was called in an unsupported way (programming error)."""


class ValidationError(HistmError):
    """Input data violates a documented precondition."""


class NumericDomainError(HistmError):
    """A value left the numeric domain an operation requires."""


class ParseError(ValidationError):
    """A text input could not be parsed; message carries the line number."""


class DivergenceError(HistmError):
    """Training produced a non-finite loss."""


class CheckpointError(HistmError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before all declared tensor data."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape disagrees with the config-derived shape."""
