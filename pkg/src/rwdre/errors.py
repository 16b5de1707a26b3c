"""Exception hierarchy shared by all modules."""


class RWDREError(Exception):
    """Base class for every error raised by this package."""


class ModelError(RWDREError, ValueError):
    """Invalid model description.

    ``path`` names the offending field, e.g. ``"q[1][0]"``.
    """

    def __init__(self, message, path=None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class NonStochasticRow(ModelError):
    pass


class NonPositiveTransition(ModelError):
    pass


class DuplicateJump(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class NoConvergence(RWDREError):
    pass


class GuardViolation(RWDREError):
    """A size or horizon guard was exceeded."""

    def __init__(self, message, guard=None, value=None):
        self.guard = guard
        self.value = value
        super().__init__(message)


class EnumerationTooLarge(GuardViolation):
    pass


class HorizonTooLarge(GuardViolation):
    pass


class HorizonExceeded(GuardViolation):
    pass


class TimeOrderViolation(RWDREError):
    pass


class TailNotSmall(RWDREError):
    pass


class EmptySupport(RWDREError):
    pass


class DegenerateDirection(RWDREError):
    pass


class InsufficientEnvironments(RWDREError):
    pass


class NoDecayDetected(RWDREError):
    def __init__(self, message, floor=None, errors=None):
        self.floor = floor
        self.errors = errors
        super().__init__(message)
