"""Single-loop bilevel optimizer with finite-difference hypergradient
estimators, an exact second-order verification layer, and deterministic
synthetic benchmarks."""

__version__ = "0.1.0"

from .benchmarks import (
    MatrixSensingProblem,
    PLGameProblem,
    ToyProblem,
    gen_matsense,
    gen_plgame,
    load_problem,
    save_problem,
    sensing_metrics,
    toy_problem,
)
from .estimators import (
    FdConfig,
    cap_norm,
    fd_hvp,
    fd_jvp,
    project_ball,
    r_grad_estimate,
    surrogate_hypergrad,
)
from .exact import (
    ClampedSpectrum,
    SecondOrderUnavailable,
    clamp_spectrum,
    exact_hypergrad,
    exact_total_grad,
    hypergrad_gap_bound,
    lyapunov,
    v_star,
)
from .numerics import EigenError, make_rng, normal_sample, sym_eigen, symmetrize
from .problem import (
    L1,
    BilevelOracle,
    BoxIndicator,
    SmoothnessConstants,
    Zero,
    counting_oracle,
    gradient_mapping,
    prox_step,
)
from .solver import (
    DivergenceError,
    HyperParams,
    RunResult,
    SolverState,
    TraceOptions,
    TraceRow,
    gamma_bound,
    lambda_bound,
    run,
    step,
    step_size_bounds,
    tau_bound,
)

__all__ = [
    "__version__",
    "BilevelOracle",
    "BoxIndicator",
    "ClampedSpectrum",
    "DivergenceError",
    "EigenError",
    "FdConfig",
    "HyperParams",
    "L1",
    "MatrixSensingProblem",
    "PLGameProblem",
    "RunResult",
    "SecondOrderUnavailable",
    "SmoothnessConstants",
    "SolverState",
    "ToyProblem",
    "TraceOptions",
    "TraceRow",
    "Zero",
    "cap_norm",
    "clamp_spectrum",
    "counting_oracle",
    "exact_hypergrad",
    "exact_total_grad",
    "fd_hvp",
    "fd_jvp",
    "gamma_bound",
    "gen_matsense",
    "gen_plgame",
    "gradient_mapping",
    "hypergrad_gap_bound",
    "lambda_bound",
    "load_problem",
    "lyapunov",
    "make_rng",
    "normal_sample",
    "project_ball",
    "prox_step",
    "r_grad_estimate",
    "run",
    "save_problem",
    "sensing_metrics",
    "step",
    "step_size_bounds",
    "surrogate_hypergrad",
    "sym_eigen",
    "symmetrize",
    "tau_bound",
    "toy_problem",
    "v_star",
]
