"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 3, ``NumericError`` -> 4.
"""


class RapNetError(Exception):
    """Base class for all package errors."""


class ShapeError(RapNetError, ValueError):
    """Tensor dimensions are inconsistent with an operation's contract."""


class InvalidMaskError(RapNetError, ValueError):
    """A key mask hides every key of some batch element."""


class InvalidStateError(RapNetError, RuntimeError):
    """Recurrent state is not usable for the requested operation."""


class BufferFullError(InvalidStateError):
    """A push was attempted on a long-memory buffer already at capacity."""


class NumericError(RapNetError, FloatingPointError):
    """Non-finite values appeared in activations, gates, gradients or losses."""


class DataError(RapNetError, ValueError):
    """Input data or configuration failed validation."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataError):
    """File payload is shorter than its header promises."""
