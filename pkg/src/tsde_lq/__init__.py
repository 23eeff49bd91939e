"""Thompson sampling with dynamic episodes for linear-quadratic control with unknown dynamics."""

from .lqr_core import CostMatrices, RiccatiDivergence, RiccatiSolution, SystemParams, solve_dare
from .posterior import PosteriorState, RejectionExhausted, SupportSet
from .regret import AggregateReport, MonteCarloConfig, decompose, diagnostics_check, fit_slope, run_monte_carlo
from .stability import StabilityCertificate, certify, compute_t_min_star, state_bound_constants
from .tsde import RunRecord, StateExplosion, TSDEConfig, run

__all__ = [
    "AggregateReport", "CostMatrices", "MonteCarloConfig", "PosteriorState", "RejectionExhausted",
    "RiccatiDivergence", "RiccatiSolution", "RunRecord", "StabilityCertificate", "StateExplosion",
    "SupportSet", "SystemParams", "TSDEConfig", "certify", "compute_t_min_star", "decompose",
    "diagnostics_check", "fit_slope", "run", "run_monte_carlo", "solve_dare", "state_bound_constants",
]
