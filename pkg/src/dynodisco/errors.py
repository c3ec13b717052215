"""Exception types shared across the package."""


class DynoDiscoError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DynoDiscoError, ValueError):
    pass


class IntegrationError(DynoDiscoError, ArithmeticError):
    """An ODE integration produced a non-finite state or could not advance.

    ``time`` is the last time reached with a finite state and ``step`` the
    index of the failing step, when known.
    """

    def __init__(self, message, time=None, step=None):
        super().__init__(message)
        self.time = time
        self.step = step


class InitializationError(DynoDiscoError):
    pass


class TrainingError(DynoDiscoError):
    pass


class AdaptationError(DynoDiscoError):
    pass


class CompatibilityError(DynoDiscoError):
    """Model and dataset disagree on the feature library or dimensions."""
