"""Constrained differential dynamic programming.

Solvers: unconstrained DDP, slack-variable KKT DDP (S-KKT), an active-set
baseline, augmented-Lagrangian DDP with a C^2 penalty, and the AL -> S-KKT
combination for problems with control limits.
"""

from .al import AlOptions, PenaltyState, penalty_eval, penalty_kernel, solve_al
from .core import Options, Problem, RegState, SolverReport, Trajectory, rollout, solve_unconstrained, total_cost
from .estimators import ActiveSetSolver, ALSolver, DDPSolver, HybridSolver, SKKTSolver, make_solver
from .hybrid import HybridOptions, SwitchConfig, solve_hybrid
from .problems import car_problem, cartpole_problem, quadrotor_problem
from .skkt import SkktOptions, solve_active_set, solve_skkt

__all__ = [
    "ALSolver", "ActiveSetSolver", "AlOptions", "DDPSolver", "HybridOptions", "HybridSolver", "Options",
    "PenaltyState", "Problem", "RegState", "SKKTSolver", "SkktOptions", "SolverReport", "SwitchConfig",
    "Trajectory", "car_problem", "cartpole_problem", "make_solver", "penalty_eval", "penalty_kernel",
    "quadrotor_problem", "rollout", "solve_active_set", "solve_al", "solve_hybrid", "solve_skkt",
    "solve_unconstrained", "total_cost",
]
