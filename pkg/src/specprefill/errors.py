"""Exception hierarchy shared across the package."""


class SpecPrefillError(Exception):
    """Base class for all package errors."""


class ConfigError(SpecPrefillError, ValueError):
    """Invalid model, speculation or cost-model configuration."""


class PositionError(SpecPrefillError, ValueError):
    """Position ids that are non-increasing, negative or out of range."""


class CacheCapacityError(SpecPrefillError):
    """A KV cache write would exceed the allocated number of slots."""


class CheckpointError(SpecPrefillError):
    """A checkpoint file is malformed, inconsistent or truncated."""


class EmptyAggregationError(SpecPrefillError, ValueError):
    """Aggregation requested over an attention tensor with no valid rows."""


class RequestFileError(SpecPrefillError):
    """A request file line could not be parsed.

    Attributes:
        line_number: 1-based line that failed.
        partial: requests successfully parsed before the failing line.
    """

    def __init__(self, message, line_number, partial=()):
        super().__init__(message)
        self.line_number = line_number
        self.partial = list(partial)
