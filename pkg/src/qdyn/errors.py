"""Exception types shared across the package."""


class QdynError(Exception):
    """Base class for package errors."""


class DegenerateChartError(QdynError):
    """Parametrization is singular (first fundamental form not SPD)."""


class SymmetryViolationError(QdynError):
    """Shape operator has complex eigenvalues; normal or derivatives are wrong."""


class OutOfTubeError(QdynError):
    """Normal offset leaves the region where the tube metric is valid."""


class HypothesisViolationError(QdynError):
    """A confining-potential hypothesis fails (e.g. degenerate normal Hessian)."""


class IntegrationError(QdynError):
    """Quadrature did not converge to the requested accuracy."""


class DomainTooSmallError(QdynError):
    """Normal domain too small: oscillator ground state leaks past the wall."""


class GridMismatchError(QdynError):
    """Wavefunction and operator grids are incompatible."""


class StepFailureError(QdynError):
    """Krylov step did not converge; reduce the time step."""


class SpectralFailureError(QdynError):
    """Eigenvalue iteration did not converge within its budget."""


class ParameterError(QdynError):
    """A parameter is outside its valid range."""


class AuditFailure(QdynError):
    """Hypothesis audit failed; experiment refuses to run."""

    def __init__(self, message, hypothesis=None):
        super().__init__(message)
        self.hypothesis = hypothesis


class ConfigError(QdynError):
    """Configuration is malformed; message names the offending key."""
