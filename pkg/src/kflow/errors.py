class KflowError(Exception):
    """Base class for errors raised by kflow."""


class DomainError(KflowError, ValueError):
    """An argument lies outside the domain of an operation."""


class ParameterError(KflowError, ValueError):
    """Inconsistent or invalid numerical parameters."""


class PreconditionError(KflowError, ValueError):
    """A documented precondition of an operation does not hold."""


class NumericalError(KflowError, RuntimeError):
    """A numerical procedure failed to converge or produced garbage."""

    def __init__(self, message, residual=None, last_valid=None):
        super().__init__(message)
        self.residual = residual
        self.last_valid = last_valid


class FlowDiverged(NumericalError):
    """The instability guard aborted a run; ``trace`` holds the snapshots so far."""

    def __init__(self, message, trace=None, step=None):
        super().__init__(message)
        self.trace = trace
        self.step = step
