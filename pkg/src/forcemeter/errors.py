"""Exception types shared across the package.

Two families: ``ValidationError`` for bad inputs (CLI exit code 2) and
``NumericalError`` for runtime numerical failures (CLI exit code 3).
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class InvalidStateError(ValidationError):
    """Gaussian state is not normalizable (Re(sigma_tilde) <= 0)."""


class InvalidMeasurementError(ValidationError):
    """Measurement variance D must be positive."""


class InvalidSensitivityError(ValidationError):
    """Sensitivity k must be positive."""


class GridError(ValidationError):
    """Record grid is incompatible with the requested schedule."""


class DegenerateCovarianceError(ValidationError):
    """Covariance conditioning requires P11 > 0."""


class NumericalError(RuntimeError):
    """Numerical failure (instability, non-finite cost, lost bracket)."""
