"""Exception types shared across the package."""


class BvaeError(Exception):
    """Base class for all package errors."""


class DimensionError(BvaeError, ValueError):
    """Operand shapes do not agree."""


class ShapeConfigError(BvaeError, ValueError):
    """Layer or convolution geometry does not produce integral extents."""


class ContractError(BvaeError, ValueError):
    """A precondition on arguments was violated."""


class NumericError(BvaeError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class StateError(BvaeError, RuntimeError):
    """An operation was requested before its prerequisite state exists."""


class ParseError(BvaeError, ValueError):
    """A binary file could not be parsed.  ``offset`` is the failing byte."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(BvaeError, ValueError):
    """A checkpoint file is corrupt, truncated, or from another version."""


class ConfigError(BvaeError, ValueError):
    """A training or CLI configuration value is invalid."""
