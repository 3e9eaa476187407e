"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class DomainError(ValueError):
    """An argument is outside the operation's valid domain."""


class FormatError(ValueError):
    """A file could not be decoded or fails its format contract."""


class NumericFailure(ArithmeticError):
    """A computation produced non-finite values."""
