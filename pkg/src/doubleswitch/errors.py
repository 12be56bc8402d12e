"""Exception hierarchy shared by all modules."""


class DoubleSwitchError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(DoubleSwitchError, ValueError):
    pass


class IntegrationFailure(DoubleSwitchError):
    """An ODE integration stopped before reaching its final time."""

    def __init__(self, message, last_time=None):
        super().__init__(message)
        self.last_time = last_time


class NumericalFailure(DoubleSwitchError):
    pass


class DegenerateConstraint(DoubleSwitchError):
    """Constraint gradients are (numerically) linearly dependent."""


class InfeasiblePoint(DoubleSwitchError, ValueError):
    pass


class TransversalityViolation(DoubleSwitchError):
    """A covector is not in the span of the constraint gradients."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class HestenesFailure(DoubleSwitchError):
    pass


class NewtonFailure(DoubleSwitchError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class BranchMismatch(DoubleSwitchError):
    """Newton converged, but to a root with the switching times in the wrong order."""

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class ContinuationFailure(DoubleSwitchError):
    pass


class FixtureFailure(DoubleSwitchError):
    pass


class OracleInfeasible(DoubleSwitchError):
    pass


class UniquenessViolation(DoubleSwitchError):
    def __init__(self, message, solutions=None):
        super().__init__(message)
        self.solutions = solutions or []


class NumericalInconsistencyWarning(UserWarning):
    """Equivalent formulations of one condition disagree beyond tolerance."""
