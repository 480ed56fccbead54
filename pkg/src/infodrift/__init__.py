"""Information drift and insider control under initially enlarged filtrations.

Numerical library for the semimartingale decomposition of a Brownian motion
and a compensated Poisson random measure after the filtration is enlarged at
time zero by a first-order-chaos signal: conditional Donsker-delta kernels,
the resulting information drift and jump-compensator correction, the optimal
log-utility insider control, and Monte Carlo verification of the decomposed
martingale parts.
"""

from .model import (
    DiscreteLevyMeasure,
    EmptyMeasure,
    HorizonTooLate,
    MarketSpec,
    ModelValidationError,
    SignalSpec,
    StepFunction,
    TimeGrid,
    ValidatedModel,
    ZeroDiffusionTail,
    validate_model,
)
from .kernel import (
    FourierState,
    FourierTail,
    OffLattice,
    QuadratureDidNotConverge,
    QuadratureSpec,
    build_tail,
    cond_delta,
    cond_malliavin_B,
    cond_malliavin_N,
    fourier_state,
    integrand_F,
)
from .paths import (
    ControlPolicy,
    Ensemble,
    InadmissibleControl,
    SamplePath,
    log_wealth,
    log_wealth_ensemble,
    simulate,
)
from .drift import (
    DenominatorUnderflow,
    DriftField,
    WrongModel,
    closed_form_phi_brownian,
    closed_form_psi_poisson,
    compute_drift_field,
    phi,
    psi,
)
from .optimizer import (
    FocProblem,
    InadmissiblePoint,
    NoAdmissibleRoot,
    ValueEstimate,
    build_insider_policy,
    expected_log_wealth,
    foc_residual,
    honest_benchmark,
    solve_optimal_control,
)

__version__ = "0.1.0"
