"""Exception hierarchy shared across the package.

CLI exit codes map onto these: usage errors -> 1, DataError -> 2,
NumericalError -> 3.
"""


class SplatError(Exception):
    """Base class for all package-specific errors."""


class DataError(SplatError):
    """Malformed, inconsistent, or missing input data."""


class InvalidParameterError(SplatError):
    """A function argument violates its contract (non-finite, wrong shape, ...)."""


class InvalidStateError(SplatError):
    """Objects passed together are out of sync (e.g. stale render output)."""


class InsufficientDataError(DataError):
    """Not enough input data to perform the operation."""


class UnsupportedModelError(DataError):
    """COLMAP camera model that this engine does not support."""


class CorruptFileError(DataError):
    """A binary file ended early or failed structural validation."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class LabelRangeError(DataError):
    """A mask pixel holds a class id outside the class table."""


class NumericalError(SplatError):
    """Optimization diverged or produced non-finite state."""
