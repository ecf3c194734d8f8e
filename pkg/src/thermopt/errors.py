"""Exception hierarchy shared across the package."""


class ThermoptError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ThermoptError):
    """Invalid mesh/model/problem configuration or config file."""


class DomainError(ThermoptError):
    """Argument outside the mathematical domain of an operation."""


class AssemblyError(ThermoptError):
    """Inconsistent data detected during finite element assembly."""


class SolverFailure(ThermoptError):
    """A linear solve did not meet its residual contract."""


class NonconvergenceError(ThermoptError):
    """Nonlinear iteration hit its cap before reaching tolerance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class CriticalityError(ThermoptError):
    """Computed temperature not bounded away from the critical value."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class AdjointFailure(ThermoptError):
    """Adjoint or sensitivity block system could not be solved."""


class EstimationError(ThermoptError):
    """Eigenvalue or constant estimation failed to converge."""


class CertificateInfeasibleError(ThermoptError):
    """Certificate constants cannot be evaluated for the given inputs."""
