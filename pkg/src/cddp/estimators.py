"""Estimator-style wrappers: configure in ``__init__``, ``fit(problem)``, ``predict(states)``.

``fit`` stores the optimized ``trajectory_``, a ``report_`` with
independently recomputed feasibility numbers, the solver ``diagnostics_``
and the feedback ``gains_`` of a final backward pass at the solution.
``predict`` applies the resulting time-varying affine policy.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .al import AlOptions, AugmentedCost, control_limited_gain_fn, solve_al
from .core import (
    BackwardPassError,
    GainSchedule,
    Options,
    RegState,
    Trajectory,
    ddp_backward_pass,
    dynamics_defect,
    solve_unconstrained,
)
from .hybrid import HybridOptions, SwitchConfig, solve_hybrid
from .models import NoConstraints, max_violation
from .skkt import SkktOptions, active_set_backward, skkt_backward_pass, solve_active_set, solve_skkt


def finalize_report(problem, traj: Trajectory, report, cmodel=None):
    """Overwrite the feasibility fields with values recomputed from ``traj``."""
    cmodel = cmodel if cmodel is not None else (problem.constraints or NoConstraints())
    report.max_violation = max_violation(cmodel, traj)
    report.max_defect = dynamics_defect(problem.dynamics, traj)
    return report


class _SolverBase(BaseEstimator):
    solver_name = ""

    def _reg(self):
        return RegState(nu1=self.nu_init, nu2=self.nu_init, nu_min=self.nu_min, nu_max=self.nu_max)

    def _base_options(self):
        return dict(max_iter=self.max_iter, cost_tol=self.cost_tol, violation_tol=self.violation_tol,
                    time_budget=self.time_budget, reg=self._reg())

    def fit(self, problem, init_trajectory: Trajectory | None = None):
        traj, report = self._solve(problem, init_trajectory)
        self.trajectory_ = traj
        self.report_ = finalize_report(problem, traj, report, self._report_constraints(problem))
        self.diagnostics_ = report.diagnostics
        try:
            self.gains_ = self._policy(problem, traj)
        except BackwardPassError:
            # open-loop fallback
            self.gains_ = GainSchedule(np.zeros_like(traj.controls), np.zeros((traj.horizon, traj.m, traj.n)))
        self.problem_ = problem
        return self

    def _report_constraints(self, problem):
        return problem.constraints or NoConstraints()

    def _policy(self, problem, traj):
        bw = ddp_backward_pass(traj, problem.dynamics, problem.cost, self._reg())
        return bw.gains

    def predict(self, states):
        """Controls ``u_k = u_bar_k + K_k (x_k - x_bar_k)`` for a state sequence of length ``N`` or ``N + 1``."""
        check_is_fitted(self, "trajectory_")
        X = np.atleast_2d(np.asarray(states, dtype=float))
        N = self.trajectory_.horizon
        if X.shape[1] != self.trajectory_.n or X.shape[0] not in (N, N + 1):
            raise ValueError(f"states must have shape ({N} or {N + 1}, {self.trajectory_.n})")
        dX = X[:N] - self.trajectory_.states[:N]
        return self.trajectory_.controls + np.einsum("kmn,kn->km", self.gains_.K, dX)

    def score(self, problem=None):
        """Negative final cost, so larger is better."""
        check_is_fitted(self, "report_")
        return -self.report_.cost


class DDPSolver(_SolverBase):
    """Unconstrained DDP/iLQR; a control box (if any) is enforced by clamping."""

    def __init__(self, max_iter=15, cost_tol=8e-2, violation_tol=1e-7, time_budget=None, nu_init=1e-6,
                 nu_min=1e-6, nu_max=1e10, control_limited=False):
        self.max_iter = max_iter
        self.cost_tol = cost_tol
        self.violation_tol = violation_tol
        self.time_budget = time_budget
        self.nu_init = nu_init
        self.nu_min = nu_min
        self.nu_max = nu_max
        self.control_limited = control_limited

    def _solve(self, problem, init):
        gain_fn = control_limited_gain_fn(problem.u_lo, problem.u_hi) if self.control_limited else None
        return solve_unconstrained(problem, Options(**self._base_options()), traj=init, gain_fn=gain_fn,
                                   clamp=self.control_limited)


class SKKTSolver(_SolverBase):
    """Slack-variable KKT DDP."""

    def __init__(self, max_iter=15, cost_tol=8e-2, violation_tol=1e-7, time_budget=None, nu_init=1e-6,
                 nu_min=1e-6, nu_max=1e10, eps=1e-4, zeta=0.99, eta=0.5, mu_ratio=0.01, inner_max_iter=30,
                 control_box=False):
        self.max_iter = max_iter
        self.cost_tol = cost_tol
        self.violation_tol = violation_tol
        self.time_budget = time_budget
        self.nu_init = nu_init
        self.nu_min = nu_min
        self.nu_max = nu_max
        self.eps = eps
        self.zeta = zeta
        self.eta = eta
        self.mu_ratio = mu_ratio
        self.inner_max_iter = inner_max_iter
        self.control_box = control_box

    def _options(self):
        return SkktOptions(**self._base_options(), eps=self.eps, zeta=self.zeta, eta=self.eta,
                           mu_ratio=self.mu_ratio, inner_max_iter=self.inner_max_iter)

    def _solve(self, problem, init):
        return solve_skkt(problem, self._options(), traj=init, control_box=self.control_box)

    def _policy(self, problem, traj):
        return skkt_backward_pass(traj, problem, self._reg(), self._options()).gains


class ActiveSetSolver(_SolverBase):
    """Baseline holding near-active constraints as equalities."""

    def __init__(self, max_iter=15, cost_tol=8e-2, violation_tol=1e-7, time_budget=None, nu_init=1e-6,
                 nu_min=1e-6, nu_max=1e10, active_threshold=1e-3):
        self.max_iter = max_iter
        self.cost_tol = cost_tol
        self.violation_tol = violation_tol
        self.time_budget = time_budget
        self.nu_init = nu_init
        self.nu_min = nu_min
        self.nu_max = nu_max
        self.active_threshold = active_threshold

    def _options(self):
        return SkktOptions(**self._base_options(), active_threshold=self.active_threshold)

    def _solve(self, problem, init):
        return solve_active_set(problem, self._options(), traj=init)

    def _policy(self, problem, traj):
        return active_set_backward(traj, problem, self._reg(), self._options()).gains


class ALSolver(_SolverBase):
    """Augmented-Lagrangian DDP with the smooth penalty."""

    def __init__(self, max_iter=15, cost_tol=8e-2, violation_tol=1e-7, time_budget=None, nu_init=1e-6,
                 nu_min=1e-6, nu_max=1e10, lam0=1e-2, mu0=1.0, mu_max=1e8, growth=10.0, improvement=0.25,
                 inner_max_iter=20, inner_cost_tol=1e-2):
        self.max_iter = max_iter
        self.cost_tol = cost_tol
        self.violation_tol = violation_tol
        self.time_budget = time_budget
        self.nu_init = nu_init
        self.nu_min = nu_min
        self.nu_max = nu_max
        self.lam0 = lam0
        self.mu0 = mu0
        self.mu_max = mu_max
        self.growth = growth
        self.improvement = improvement
        self.inner_max_iter = inner_max_iter
        self.inner_cost_tol = inner_cost_tol

    def _options(self):
        return AlOptions(**self._base_options(), lam0=self.lam0, mu0=self.mu0, mu_max=self.mu_max,
                         growth=self.growth, improvement=self.improvement, inner_max_iter=self.inner_max_iter,
                         inner_cost_tol=self.inner_cost_tol)

    def _solve(self, problem, init):
        traj, report, self.penalty_state_ = solve_al(problem, self._options(), traj=init, return_state=True)
        return traj, report

    def _policy(self, problem, traj):
        cmodel = problem.constraints or NoConstraints()
        aug = AugmentedCost(problem.cost, cmodel, self.penalty_state_)
        limited = problem.u_lo is not None or problem.u_hi is not None
        gain_fn = control_limited_gain_fn(problem.u_lo, problem.u_hi) if limited else None
        return ddp_backward_pass(traj, problem.dynamics, aug, self._reg(), gain_fn=gain_fn).gains


class HybridSolver(_SolverBase):
    """AL warm start, then S-KKT with the control box."""

    def __init__(self, max_iter=15, cost_tol=8e-2, violation_tol=1e-7, time_budget=None, nu_init=1e-6,
                 nu_min=1e-6, nu_max=1e10, al_violation_tol=1e-2, al_cost_tol=1.0, patience=3, eta=0.5,
                 max_switches=3):
        self.max_iter = max_iter
        self.cost_tol = cost_tol
        self.violation_tol = violation_tol
        self.time_budget = time_budget
        self.nu_init = nu_init
        self.nu_min = nu_min
        self.nu_max = nu_max
        self.al_violation_tol = al_violation_tol
        self.al_cost_tol = al_cost_tol
        self.patience = patience
        self.eta = eta
        self.max_switches = max_switches

    def _solve(self, problem, init):
        base = self._base_options()
        opts = HybridOptions(al=AlOptions(**base), skkt=SkktOptions(**base, eta=self.eta),
                             switch=SwitchConfig(self.al_violation_tol, self.al_cost_tol, self.patience),
                             max_switches=self.max_switches, time_budget=self.time_budget)
        return solve_hybrid(problem, opts, traj=init)

    def _policy(self, problem, traj):
        opts = SkktOptions(reg=self._reg())
        return skkt_backward_pass(traj, problem, self._reg(), opts).gains


SOLVERS = {
    "ddp": DDPSolver,
    "skkt": SKKTSolver,
    "active_set": ActiveSetSolver,
    "al": ALSolver,
    "hybrid": HybridSolver,
}


def make_solver(name: str, **params):
    try:
        cls = SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {sorted(SOLVERS)}") from None
    return cls(**params)


__all__ = ["DDPSolver", "SKKTSolver", "ActiveSetSolver", "ALSolver", "HybridSolver", "SOLVERS", "make_solver",
           "finalize_report"]
