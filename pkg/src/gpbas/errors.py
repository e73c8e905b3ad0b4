"""Exception hierarchy shared by every gpbas module."""


class GpBasError(Exception):
    """Base class for all errors raised by gpbas."""


class InvalidArgumentError(GpBasError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(GpBasError, ArithmeticError):
    """A factorization or iteration failed numerically."""

    def __init__(self, message, jitter_levels=None):
        super().__init__(message)
        self.jitter_levels = list(jitter_levels or [])


class BoundaryViolationError(GpBasError):
    """A state left the safe set (some h_i(x) <= 0).

    ``index`` is the rollout step at which the violation happened, when known.
    """

    def __init__(self, message, index=None, h=None):
        super().__init__(message)
        self.index = index
        self.h = h


class NotStabilizableError(NumericalError):
    """Riccati iteration diverged."""


class SolverStalledError(GpBasError):
    """DDP could not find an improving step; carries the best solution so far."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class InvariantError(GpBasError):
    """An internal invariant (e.g. a PSD variance) was violated."""
