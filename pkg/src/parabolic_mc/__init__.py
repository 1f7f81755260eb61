"""Monte Carlo solvers for parametric parabolic PDEs with reusable Brownian bundles."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, HorizonTooShortError, MissingArtifactError,
                     NumericalBlowupError, ParabolicMCError, TrainingError, UsageError)
from .rng_paths import BrownianBundle, TimeGrid, sample_bundle
from .sde_sim import DriftSpec, VolSpec, euler_maruyama
from .girsanov_fk import (PdeProblem, SolutionEstimate, feynman_kac_direct,
                          feynman_kac_importance, log_likelihood_ratio, solve_semilinear_reference)
from .pde_zoo import analytic_solution, make_canonical, normalized_error

__all__ = [
    "ConfigurationError", "HorizonTooShortError", "MissingArtifactError", "NumericalBlowupError",
    "ParabolicMCError", "TrainingError", "UsageError", "BrownianBundle", "TimeGrid",
    "sample_bundle", "DriftSpec", "VolSpec", "euler_maruyama", "PdeProblem", "SolutionEstimate",
    "feynman_kac_direct", "feynman_kac_importance", "log_likelihood_ratio",
    "solve_semilinear_reference", "analytic_solution", "make_canonical", "normalized_error",
]
