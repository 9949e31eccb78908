"""Exception types shared across the package."""


class ESMCError(Exception):
    """Base class."""


class ConfigError(ESMCError, ValueError):
    """Invalid configuration: shapes, weights, unknown keys."""


class UsageError(ESMCError, RuntimeError):
    """An API was called out of order."""


class SchemaError(ESMCError, ValueError):
    """Feature schema mismatch."""


class InputError(ESMCError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class HierarchyError(InputError):
    """Labels violate o <= a <= c."""


class ChecksumError(ESMCError, ValueError):
    """Checkpoint payload is truncated or corrupted."""


class NonFiniteGradientError(ESMCError, FloatingPointError):
    def __init__(self, group):
        super().__init__(f"non-finite gradient in parameter group {group!r}")
        self.group = group


class TrainingDivergedError(ESMCError, FloatingPointError):
    """Non-finite loss during training; ``model`` holds the last good parameters."""

    def __init__(self, message, step, model=None, log=None):
        super().__init__(message)
        self.step = step
        self.model = model
        self.log = log
