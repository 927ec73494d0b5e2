"""Exception types shared across the package."""


class SafePiError(Exception):
    """Base class for all library-specific failures."""


class GenerationError(SafePiError):
    """Random system generation exhausted its rejection-sampling budget."""


class NotStabilizableError(SafePiError):
    """Riccati iteration diverged; the pair (A, B) is not stabilizable."""


class ConvergenceError(SafePiError):
    """An iterative solve hit its iteration cap before reaching tolerance."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class InstabilityError(SafePiError):
    """A closed-loop matrix that must be Schur stable is not."""


class SynthesisError(SafePiError):
    """Initial invariant-set synthesis failed.

    Carries the largest admissible ellipsoid level that was achievable, so
    callers can report how far the requested initial state was from being
    certifiable.
    """

    def __init__(self, msg, max_rho=None):
        super().__init__(msg)
        self.max_rho = max_rho


class PersistenceError(SafePiError):
    """Collected data is not persistently exciting (rank-deficient)."""


class EvaluationError(SafePiError):
    """Policy-evaluation SDP was infeasible or failed certification.

    The caller is expected to keep the previous certified ellipsoid and
    extend the data window.
    """

    def __init__(self, msg, status=None):
        super().__init__(msg)
        self.status = status


class SafetyViolationError(SafePiError):
    """A state or input constraint was violated during an episode."""

    def __init__(self, msg, t=None, row=None, value=None):
        super().__init__(msg)
        self.t = t
        self.row = row
        self.value = value


class PreconditionError(SafePiError):
    """A documented call precondition does not hold."""
