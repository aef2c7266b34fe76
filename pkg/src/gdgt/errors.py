"""Exception types shared across the package."""


class GDGTError(Exception):
    """Base class for all package errors."""


class DimensionError(GDGTError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(GDGTError, ValueError):
    """Invalid or inconsistent configuration."""


class RangeError(GDGTError, ValueError):
    """A coordinate lies outside its domain."""


class SingularityError(GDGTError, ValueError):
    """A Jacobian determinant vanished."""


class NumericError(GDGTError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(GDGTError):
    """A checkpoint file has the wrong magic or version."""


class IntegrityError(GDGTError):
    """A checkpoint file is truncated, corrupted, or incomplete."""
