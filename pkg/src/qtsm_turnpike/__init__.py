"""Optimal portfolios and turnpike rate experiments in quadratic term-structure models."""

from .model import ModelStructureError, QtsmModel, ValidationReport, eval_market, validate
from .montecarlo import (
    McEstimate,
    PathEnsemble,
    SimGrid,
    attach_functionals,
    convergence_study,
    estimate,
    simulate_discount,
    simulate_factor,
    simulate_functionals,
)
from .portfolio import (
    decompose,
    find_lambda_hat,
    hedging_feedback,
    myopic_feedback,
    terminal_wealth_gap,
)
from .pricing import bond_curve, bond_price, crra_feedback, eh_gamma_closed_form, myopic_measure_coeffs
from .riccati import RiccatiSpec, are_limit, is_stable, solve_terminal_riccati
from .turnpike import ExperimentConfig, fit_rate, run_experiment, theoretical_exponent
from .utility import LinearSharing, Log, ParetoCollective, Power, estimate_diff_bound

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "LinearSharing",
    "Log",
    "McEstimate",
    "ModelStructureError",
    "ParetoCollective",
    "PathEnsemble",
    "Power",
    "QtsmModel",
    "RiccatiSpec",
    "SimGrid",
    "ValidationReport",
    "are_limit",
    "attach_functionals",
    "bond_curve",
    "bond_price",
    "convergence_study",
    "crra_feedback",
    "decompose",
    "eh_gamma_closed_form",
    "estimate",
    "estimate_diff_bound",
    "eval_market",
    "find_lambda_hat",
    "fit_rate",
    "hedging_feedback",
    "is_stable",
    "myopic_feedback",
    "myopic_measure_coeffs",
    "run_experiment",
    "simulate_discount",
    "simulate_factor",
    "simulate_functionals",
    "solve_terminal_riccati",
    "terminal_wealth_gap",
    "theoretical_exponent",
    "validate",
]
