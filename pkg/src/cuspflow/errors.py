"""Exception types shared across the package."""


class CuspFlowError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(CuspFlowError, ValueError):
    """Rejected torus, schedule or run configuration."""


class InvalidBackgroundError(CuspFlowError, ValueError):
    """A background field violates a precondition (e.g. ``|s|_h^2 >= 1``)."""


class InvalidMetricError(CuspFlowError, ValueError):
    """A density that must be positive is not."""


class NonConvergenceError(CuspFlowError, RuntimeError):
    """Newton iteration stalled or hit its iteration cap."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class StepRejectedError(NonConvergenceError):
    """No damping factor keeps the density above the positivity margin."""


class AbortedRunError(CuspFlowError, RuntimeError):
    """A flow gave up; carries the partial trace."""

    def __init__(self, message, trace=None, state=None):
        super().__init__(message)
        self.trace = trace
        self.state = state


class DiagnosticUnavailable(CuspFlowError, ValueError):
    """Not enough data or resolution for a requested diagnostic."""


class MissingArtifactError(CuspFlowError, FileNotFoundError):
    """A stage needs outputs of an earlier stage that are not on disk."""

    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("missing artifacts: " + ", ".join(self.missing))
