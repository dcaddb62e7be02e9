"""Exception types shared across the package."""


class InvalidRangeError(ValueError):
    """A numeric argument violates its documented range."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible; the message names the offending dims."""


class FileFormatError(ValueError):
    """A binary container (noise store, checkpoint, NPY) failed to parse."""


class DiskBudgetError(RuntimeError):
    """A materialized artifact would exceed the configured disk budget."""
