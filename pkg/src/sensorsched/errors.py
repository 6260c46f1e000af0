"""Exception hierarchy shared by all solver modules."""


class SchedulingError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(SchedulingError, ValueError):
    """Malformed problem data (dimension mismatch, bad mode flag, ...)."""


class SingularSylvesterError(SchedulingError):
    """Lyapunov/Sylvester operator is (numerically) singular."""


class NoStabilizingSolutionError(SchedulingError):
    """The Riccati equation has no stabilizing solution (detectability fails)."""


class SolverDivergedError(SchedulingError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class DegenerateSensorError(SchedulingError):
    """Scalar Riccati roots requested for a sensor with C = 0."""


class IntegrationBlowupError(SchedulingError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class PeriodicNonConvergenceError(SchedulingError):
    pass


class IndexDegenerateError(SchedulingError):
    """Threshold is undefined because the index is constant (C = 0 or T = 0)."""


class UnboundedDualError(SchedulingError):
    pass


class GradientUnavailableError(SchedulingError):
    pass


class InfeasibleAssignmentError(SchedulingError):
    pass


class NoFeasibleStartError(SchedulingError):
    pass


class DecompositionStalledError(SchedulingError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
