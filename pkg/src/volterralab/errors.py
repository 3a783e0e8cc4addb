"""Exception hierarchy shared by all modules."""


class VolterraLabError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(VolterraLabError, ValueError):
    """An argument lies outside the admissible range of an operation."""


class IntegrationError(VolterraLabError, ArithmeticError):
    """A kernel or lag integral failed to converge.

    Attributes:
        residual: last observed change between refinement levels (or ``inf``
            when the integrand is not integrable).
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual estimate {residual:.3e})")
        self.residual = residual


class SamplingInfeasibleError(VolterraLabError, RuntimeError):
    """No exact sampler is available for the requested covariance and grid."""

    def __init__(self, message, min_eigenvalue):
        super().__init__(f"{message}; smallest embedding eigenvalue {min_eigenvalue:.6e}")
        self.min_eigenvalue = min_eigenvalue


class NotPSDError(VolterraLabError, ValueError):
    """A matrix expected to be positive semi-definite is not."""


class PreconditionError(VolterraLabError, ValueError):
    """Inputs violate a documented precondition."""


class GridError(VolterraLabError, ValueError):
    """Time grids are incompatible (coverage, alignment, step rules)."""


class ConsistencyError(VolterraLabError, RuntimeError):
    """Two independent estimators of the same quantity disagree."""


class ModelError(VolterraLabError, RuntimeError):
    """An effective model produced an invalid covariance."""


class ExtrapolationError(VolterraLabError, ValueError):
    """A trajectory left the tabulated spatial grid."""


class ConfigError(VolterraLabError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
