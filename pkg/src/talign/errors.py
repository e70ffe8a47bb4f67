"""Exception types shared across the package."""


class TAlignError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(TAlignError, ValueError):
    pass


class ShapeError(TAlignError, ValueError):
    pass


class NumericError(TAlignError, ArithmeticError):
    """Degenerate or non-finite numbers where finite, well-conditioned ones are required."""


class InsufficientDataError(TAlignError, ValueError):
    pass


class FormatError(TAlignError, ValueError):
    """Malformed binary container; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(TAlignError, ValueError):
    """Checkpoint missing, malformed, or incompatible with the requested model."""
