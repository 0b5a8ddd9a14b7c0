class RegistrationError(Exception):
    """Base class for errors raised by the registration engine."""


class ShapeError(RegistrationError, ValueError):
    """
    Raised when grids, channel counts or window sizes do not line up.

    Examples: moving/fixed images of different shapes, a volume whose extents are
    not divisible by the backbone's downsampling factor, a zero-extent input.
    """


class NumericalError(RegistrationError, ArithmeticError):
    """
    Raised when a loss or gradient stops being finite.

    Attributes:
        iteration (int | None): The training iteration at which the failure happened.
    """

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(RegistrationError, ValueError):
    """Raised for malformed volume files, checkpoints and manifests."""


class DegenerateStatisticError(RegistrationError, ValueError):
    """Raised when a statistic is undefined for its input (constant series, too few samples)."""
