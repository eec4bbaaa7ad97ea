"""Exception hierarchy shared across the toolkit.

``ValidationError`` subclasses signal bad inputs or configuration (CLI exit
code 1); everything else under ``FpstainError`` is a runtime or numeric
failure (CLI exit code 2).
"""


class FpstainError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(FpstainError):
    """Invalid input, configuration, or file content."""


class ConfigurationError(ValidationError):
    """Inconsistent or out-of-range configuration values."""


class ShapeError(ValidationError):
    """Array dimensions or channel counts do not match."""


class SizeError(ValidationError):
    """Image smaller than the minimum a routine requires."""


class RangeError(ValidationError):
    """Values outside the documented input range."""


class FormatError(ValidationError):
    """Malformed file: bad magic, truncation, or inconsistent header."""


class EmptyInputError(ValidationError):
    """A collection that must be nonempty was empty."""


class OutOfBandError(ValidationError):
    """Requested spectral region falls outside the available spectrum."""


class ConsistencyError(ValidationError):
    """Tile origins overlap, collide, or leave gaps."""


class NumericError(FpstainError):
    """Non-finite value encountered during computation."""
