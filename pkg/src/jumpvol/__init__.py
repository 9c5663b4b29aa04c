"""Numerical solver and verification harness for the optimal
investment-consumption-insurance problem with a jump-diffusion asset and an
external economic factor."""

from .actuarial import (
    ActuarialModel,
    InsuranceMarket,
    death_density,
    legacy,
    select_insurer,
    survival_probability,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    EstimationError,
    ModelError,
    NoInteriorSolution,
    RejectedInput,
)
from .hsolver import HGrid, HSolverConfig, apply_phi, k_term, solve_h_fixed_point
from .market import (
    CoefficientSet,
    FactorDynamics,
    JumpSpec,
    check_assumptions,
    eval_coefficients,
    sample_jump_marks,
)
from .mc import (
    NoiseBank,
    PathBundle,
    PerformanceEstimate,
    SimConfig,
    adjoint_candidate,
    adjoint_residual_test,
    estimate_performance,
    necessary_condition_test,
    perturbation_suboptimality_test,
    simulate_factor,
    simulate_wealth,
    sufficient_condition_report,
    variation_processes,
    wealth_closed_form,
)
from .oracle_ou import OUParams, ou_adjoint_a1, ou_exact_factor, ou_foc_portfolio, ou_paper_portfolio
from .strategy import (
    AdjointState,
    Preferences,
    StrategyRule,
    hamiltonian,
    inverse_marginal,
    make_optimal_rule,
    optimal_consumption,
    optimal_premium,
    portfolio_foc_residual,
    solve_portfolio,
    utility,
)

__version__ = "0.1.0"
