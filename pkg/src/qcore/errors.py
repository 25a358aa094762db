"""Exception types shared across the package."""


class QCoreError(Exception):
    """Base class for all errors raised by qcore."""


class ShapeError(QCoreError, ValueError):
    """Incompatible tensor or layer shapes."""


class UsageError(QCoreError, ValueError):
    """Invalid arguments or inputs supplied by the caller."""


class NumericError(QCoreError, ArithmeticError):
    """A computation produced NaN or infinite values."""
