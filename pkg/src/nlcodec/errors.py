"""Exception types shared across the codec."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class UsageError(ValueError):
    """Raised when an API is called with arguments outside its contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class UnsupportedFormatError(ValueError):
    """Bad magic or unknown version in a model file or bitstream."""


class ModelMismatchError(ValueError):
    """A bitstream was produced by a different model than the one decoding it."""


class CorruptStreamError(ValueError):
    """The arithmetic-coded payload is truncated or inconsistent."""


class InputError(ValueError):
    """An input file is missing, unreadable or invalid."""
