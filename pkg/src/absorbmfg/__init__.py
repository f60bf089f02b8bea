"""Mean field games with absorption and common noise: solvers and N-player checks."""
from __future__ import annotations

from .kernel import SmoothingKernel, bump_kernel, smoothed_loss, smoothed_loss_derivative
from .noise_grid import CommonNoiseGrid, conditional_atoms, discretize_path, project
from .measure_flow import SubProbabilityFlow, empirical_flow, flow_distance, pair
from .dynamics import (
    BankRunParams,
    StateModel,
    bankrun_model,
    drift_tilde,
    exit_time,
    payoff_sample,
    simulate_paths,
)
from .hamiltonian import HamiltonianSpec, hamiltonian, maximize
from .bsde import BsdeSolution, FeedbackPolicy, comparison_check, policy_value, solve_bsde
from .fixed_point import EquilibriumSolver, girsanov_density, solve_equilibrium
from .nplayer import (
    EquilibriumPolicy,
    best_response_gap,
    gap_trend_ok,
    simulate_approx_game,
    simulate_game,
)

__version__ = "0.1.0"
