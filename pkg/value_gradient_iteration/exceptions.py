class VgiError(RuntimeError):
    """Base class for numerical failures raised by this package."""


class InfeasibleError(VgiError):
    """
    No feasible input, plan or steady state exists.

    Args:
        message: Human readable description
        state: The offending state, when there is one
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class SolverError(VgiError):
    """A conic solve finished without a usable solution, or a closed-form step met a singular system."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class FittingError(SolverError):
    pass


class DivergenceError(VgiError):
    pass


class IterationAborted(VgiError):
    """
    Raised by the outer VGI/FVI loops when an iteration fails.

    The records collected so far and the last good value function are kept
    so callers can still write partial results.
    """

    def __init__(self, message, history, value_function):
        super().__init__(message)
        self.history = history
        self.value_function = value_function
