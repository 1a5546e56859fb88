"""Optimal stopping of ergodic one-dimensional diffusions with vanishing discount.

Finite-difference value functions on a horizon ladder, Poisson-equation
potentials, Monte Carlo path ensembles and independent verification of the
solved surfaces.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DimensionError,
    ErgodicityError,
    ErgostopError,
    InsufficientDataError,
    InvalidModelError,
    InvalidRegionError,
    NotApplicableError,
    ParameterError,
    SolverError,
    StepSizeError,
)
from .models import (  # noqa: F401
    DiffusionModel,
    Grid,
    RewardSpec,
    build_generator,
    double_well_model,
    ergodicity_profile,
    hitting_time_expectation,
    mu_integral,
    ou_model,
    stationary_density,
)
from .potential import (  # noqa: F401
    solve_discounted_potential,
    solve_resolvent,
    solve_zero_potential,
    verify_c_assumptions,
)
from .simulator import (  # noqa: F401
    StoppingRule,
    evaluate_rule,
    large_deviation_estimate,
    simulate,
    supermartingale_check,
    time_average,
)
from .stopping import (  # noqa: F401
    SolverConfig,
    ValueSurface,
    gamma_and_M,
    solve_finite_horizon,
    solve_infinite_horizon,
    stopping_rule,
    tau_T_limit_check,
    transformed_problem,
)
from .verification import (  # noqa: F401
    bellman_inequality_check,
    dichotomy_experiment,
    perturb,
    vi_residual,
)
