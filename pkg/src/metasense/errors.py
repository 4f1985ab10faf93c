"""Exception hierarchy shared across the package."""


class MetasenseError(Exception):
    """Base class for all package errors."""


class DomainError(MetasenseError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class SingularityError(MetasenseError, ValueError):
    """Coincident points where a kernel is singular."""


class SolveError(MetasenseError, RuntimeError):
    """A linear solve failed or was too ill-conditioned to trust."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class UnobservableError(MetasenseError, RuntimeError):
    """Effective Fisher information is singular; the position is not estimable."""

    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class SolverStatusError(MetasenseError, RuntimeError):
    """A convex solver returned a non-optimal status."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class PlacementError(MetasenseError, RuntimeError):
    """No admissible element layout could be generated."""


class ConfigError(MetasenseError, ValueError):
    """Invalid or inconsistent configuration."""
