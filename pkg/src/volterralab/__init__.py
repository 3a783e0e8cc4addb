"""Numerical laboratory for limit theorems of functionals of stationary
Volterra Gaussian processes: sampling, Hermite chaos, rough lifts, limit
matrices and fast-slow homogenisation."""

__version__ = "0.1.0"

from .errors import (ConfigError, ConsistencyError, ExtrapolationError, GridError, IntegrationError,  # noqa: E402
                     ModelError, NotPSDError, ParameterError, PreconditionError, SamplingInfeasibleError,
                     VolterraLabError)
from .volterra import (CovarianceModel, GaussianEnsemble, KernelSpec, PathGrid, covariance_model,  # noqa: E402
                       covariance_of_lag, exp_ou, fbm_increment, fou, simulate_moving_average,
                       simulate_stationary, tabulated, tail_energy_check)
from .hermite import (HermiteExpansion, MultiIndex, conditional_decay_integral,  # noqa: E402
                      conditional_hermite_norm, diagram_expectation, enumerate_pairings, expand, rank)
from .roughlift import RoughLift, lift_discrete, scaled_path  # noqa: E402
from .limits import LimitMatrices, clt_report, functional_ensemble, lag_correlation, limit_matrices  # noqa: E402
from .homogenize import (EffectiveModel, FieldModel, effective_coefficients, integrate_fast_slow,  # noqa: E402
                         kunita_npoint_euler, limit_flow_compare)
