"""reanlab: a desk-scale 4D-Var reanalysis engine and stochasticity laboratory.

The engine assimilates windowed observations of a hidden spatio-temporal
process into an analysis series; the laboratory reruns it as a seeded
ensemble to expose the analyses' stochastic structure (affinity in the
observations, shift-replay sample paths, analytic versus empirical
covariance, and the dependence pattern of the error components).
"""

__version__ = "0.1.0"

from .cost import (
    AnalysisResult,
    Covariance,
    GainOperators,
    WindowObservation,
    WindowProblem,
    background_covariance,
    eval_J,
    gain_operators,
    grad_J,
    observation_covariance,
    solve_closed_form,
    solve_iterative,
)
from .cycle import AnalysisSeries, CycleConfig, make_background, run_reanalysis, solve_window
from .dynamics import (
    NonlinearModel,
    TangentLinearModel,
    evolve_nonlinear,
    propagator_product,
    tangent_linear_at_zero,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    DomainError,
    NumericError,
    ReanlabError,
)
from .grid import (
    CompositionSet,
    GridGeometry,
    StateLayout,
    StateVector,
    exponential_covariance,
)
from .obs import ObservationGeometry, ObsOperator, build_H, predict_observations
from .world import (
    HiddenProcess,
    NoiseSpec,
    ObservationSet,
    SeedPlan,
    sample_observations,
    simulate_truth,
)

__all__ = [name for name in dir() if not name.startswith("_")]
