"""Exception types shared across the library.

Every error the pipeline can signal has its own class so that callers
(and the command-line layer) can map failures to distinct exit codes.
"""


class PlacerecError(Exception):
    """Base class for all library errors."""


class ZeroFeature(PlacerecError):
    """A local feature row has (near-)zero norm and cannot be normalized."""


class InvalidSpec(PlacerecError):
    """A synthetic dataset specification violates its invariants."""


class FormatError(PlacerecError):
    """A binary or CSV file does not match its declared format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionMismatch(PlacerecError):
    """Array shapes, or a file header and its payload, disagree."""


class TooFewSamples(PlacerecError):
    """Not enough samples to seed the requested number of clusters."""


class InsufficientStatic(PlacerecError):
    """Too few static-labeled features for semantic initialization."""


class InsufficientDynamic(PlacerecError):
    """Too few dynamic-labeled features for semantic initialization."""


class DegenerateDescriptor(PlacerecError):
    """A descriptor is identically zero and cannot be normalized."""


class NoPositive(PlacerecError):
    """No query has a geographic positive candidate; mining produced nothing."""


class EmptyIndex(PlacerecError):
    """A retrieval query was issued against an empty index."""


class DuplicateId(PlacerecError):
    """Two database entries share the same image id."""


class ConfigError(PlacerecError):
    """A configuration file or flag value is malformed."""


class RankDeficientWarning(UserWarning):
    """Whitening kept directions whose eigenvalues fall below the floor."""
