"""Augmented-Lagrangian DDP with a twice-differentiable penalty.

Inequalities are folded into the running and terminal costs through

    P(g; lam, mu) = lam^2 / mu * phi(mu g / lam)

where ``phi`` is quadratic for ``t >= -1/2`` and logarithmic below, so the
penalized cost stays C^2 and can be minimized by plain DDP. Multipliers and
penalties are updated between inner solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    Budget,
    Options,
    Problem,
    SolverReport,
    Trajectory,
    rollout,
    solve_unconstrained,
    total_cost,
)
from .models import NoConstraints, constraint_values, max_violation
from .qp import solve_box_qp

BRANCH = -0.5


def penalty_kernel(t):
    """``(phi, phi', phi'')`` at ``t``; works elementwise on arrays."""
    t = np.asarray(t, dtype=float)
    quad = t >= BRANCH
    # evaluate the log branch on a safe argument so masked entries never warn
    tl = np.where(quad, -1.0, t)
    phi = np.where(quad, 0.5 * t * t + t, -0.25 * np.log(-2.0 * tl) - 0.375)
    d1 = np.where(quad, t + 1.0, -0.25 / tl)
    d2 = np.where(quad, 1.0, 0.25 / (tl * tl))
    if phi.ndim == 0:
        return float(phi), float(d1), float(d2)
    return phi, d1, d2


@dataclass
class PenaltyEval:
    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray


def penalty_eval(lam, mu, g) -> PenaltyEval:
    """``P``, ``dP/dg = lam phi'(t)`` and ``d2P/dg2 = mu phi''(t)`` with ``t = mu g / lam``."""
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(lam <= 0) or np.any(mu <= 0):
        raise ValueError("lam and mu must be positive")
    t = mu * np.asarray(g, dtype=float) / lam
    phi, d1, d2 = penalty_kernel(t)
    return PenaltyEval(lam * lam / mu * phi, lam * d1, mu * d2)


@dataclass
class PenaltyState:
    """Multipliers and penalties, one row per knot (``N + 1`` rows of width ``w``).

    Control rows at the final knot are unused.
    """

    lam: np.ndarray
    mu: np.ndarray
    history: list = field(default_factory=list)
    lam_min: float = 1e-8
    lam_max: float = 1e8
    mu_max: float = 1e8
    growth: float = 10.0
    improvement: float = 0.25

    @classmethod
    def initial(cls, horizon: int, w: int, lam0: float = 1e-2, mu0: float = 1.0, **kw) -> "PenaltyState":
        return cls(np.full((horizon + 1, w), lam0), np.full((horizon + 1, w), mu0), **kw)

    def copy(self) -> "PenaltyState":
        return replace(self, lam=self.lam.copy(), mu=self.mu.copy(), history=list(self.history))


def multiplier_update(pstate: PenaltyState, g) -> PenaltyState:
    """``lam <- P'(g)`` entrywise, clamped to ``[lam_min, lam_max]``; non-finite ``g`` entries are skipped."""
    g = np.asarray(g, dtype=float)
    used = np.isfinite(g)
    new = pstate.copy()
    d1 = penalty_eval(pstate.lam[used], pstate.mu[used], g[used]).d1
    new.lam[used] = np.clip(d1, pstate.lam_min, pstate.lam_max)
    return new


def penalty_update(pstate: PenaltyState, violation, previous) -> PenaltyState:
    """Grow ``mu`` by ``growth`` where the violation did not shrink below ``improvement * previous``.

    ``violation`` and ``previous`` are scalars or arrays broadcastable to ``mu``.
    """
    violation = np.asarray(violation, dtype=float)
    previous = np.asarray(previous, dtype=float)
    if np.any(violation < 0) or np.any(previous < 0):
        raise ValueError("violations must be nonnegative")
    grow = np.broadcast_to(violation > pstate.improvement * previous, pstate.mu.shape)
    new = pstate.copy()
    new.mu = np.where(grow, np.minimum(pstate.mu * pstate.growth, pstate.mu_max), pstate.mu)
    new.history.append(float(np.max(violation, initial=0.0)))
    return new


class AugmentedCost:
    """Cost plus the smooth penalty of every inequality row at each knot.

    Hessians use ``P'' grad g grad g'`` plus ``P' hess g`` when the constraint
    model provides Hessians (zero by default).
    """

    def __init__(self, cost, cmodel, pstate: PenaltyState):
        self.cost = cost
        self.cmodel = cmodel
        self.pstate = pstate

    @property
    def n(self) -> int:
        return self.cost.n

    @property
    def m(self) -> int:
        return self.cost.m

    def _rows(self, x, u):
        cm = self.cmodel
        g = np.concatenate([cm.state_rows(x), cm.g_c(x, u)])
        Jcx, Jcu = cm.g_c_jac(x, u)
        Jx = np.vstack([cm.state_jac(x), Jcx])
        Ju = np.vstack([np.zeros((cm.n_p + cm.n_v, u.size)), Jcu])
        Hx = np.concatenate([cm.state_hess(x), np.zeros((cm.n_c, x.size, x.size))], axis=0)
        return g, Jx, Ju, Hx

    def running(self, x, u, k=None) -> float:
        val = self.cost.running(x, u, k)
        if self.cmodel.w == 0:
            return val
        g = np.concatenate([self.cmodel.state_rows(x), self.cmodel.g_c(x, u)])
        pe = penalty_eval(self.pstate.lam[k], self.pstate.mu[k], g)
        return val + float(pe.value.sum())

    def terminal(self, x) -> float:
        val = self.cost.terminal(x)
        ns = self.cmodel.n_p + self.cmodel.n_v
        if ns == 0:
            return val
        N = self.pstate.lam.shape[0] - 1
        pe = penalty_eval(self.pstate.lam[N, :ns], self.pstate.mu[N, :ns], self.cmodel.state_rows(x))
        return val + float(pe.value.sum())

    def running_derivs(self, x, u, k=None):
        l, lx, lu, lxx, lux, luu = self.cost.running_derivs(x, u, k)
        if self.cmodel.w == 0:
            return l, lx, lu, lxx, lux, luu
        g, Jx, Ju, Hx = self._rows(x, u)
        pe = penalty_eval(self.pstate.lam[k], self.pstate.mu[k], g)
        return (
            l + float(pe.value.sum()),
            lx + Jx.T @ pe.d1,
            lu + Ju.T @ pe.d1,
            lxx + (Jx.T * pe.d2) @ Jx + np.einsum("i,ijk->jk", pe.d1, Hx),
            lux + (Ju.T * pe.d2) @ Jx,
            luu + (Ju.T * pe.d2) @ Ju,
        )

    def terminal_derivs(self, x):
        phi, px, pxx = self.cost.terminal_derivs(x)
        cm = self.cmodel
        ns = cm.n_p + cm.n_v
        if ns == 0:
            return phi, px, pxx
        N = self.pstate.lam.shape[0] - 1
        g, J, H = cm.state_rows(x), cm.state_jac(x), cm.state_hess(x)
        pe = penalty_eval(self.pstate.lam[N, :ns], self.pstate.mu[N, :ns], g)
        return (phi + float(pe.value.sum()), px + J.T @ pe.d1,
                pxx + (J.T * pe.d2) @ J + np.einsum("i,ijk->jk", pe.d1, H))


def augmented_cost_derivs(cost_model, cmodel, pstate: PenaltyState, x, u, k: int):
    """Running-cost derivatives of the penalized cost at knot ``k``."""
    return AugmentedCost(cost_model, cmodel, pstate).running_derivs(np.asarray(x, float), np.asarray(u, float), k)


def box_qp_gains(q, lo, hi):
    """Control-limited gains: box-QP feedforward, feedback zeroed on clamped controls."""
    sol = solve_box_qp(q.Quu, q.Qu, lo, hi)
    m, n = q.Qux.shape
    K = np.zeros((m, n))
    free = ~(sol.lower | sol.upper)
    if free.any():
        K[free] = -np.linalg.solve(q.Quu[np.ix_(free, free)], q.Qux[free])
    return sol.z, K


def control_limited_gain_fn(u_lo, u_hi):
    """Gain hook for the DDP backward pass shifting the box by the nominal control."""
    lo = -np.inf if u_lo is None else np.asarray(u_lo, float)
    hi = np.inf if u_hi is None else np.asarray(u_hi, float)

    def gains(step, q, traj):
        u = traj.controls[step]
        return box_qp_gains(q, lo - u, hi - u)

    return gains


def al_backward_pass_control_limited(traj: Trajectory, dynamics, cost_model, reg, u_lo, u_hi):
    """DDP backward pass whose feedforward solves the shifted box QP at every step."""
    from .core import ddp_backward_pass

    return ddp_backward_pass(traj, dynamics, cost_model, reg, gain_fn=control_limited_gain_fn(u_lo, u_hi))


@dataclass
class AlOptions(Options):
    inner_max_iter: int = 20
    inner_cost_tol: float = 1e-2
    lam0: float = 1e-2
    mu0: float = 1.0
    mu_max: float = 1e8
    growth: float = 10.0
    improvement: float = 0.25


def solve_al(problem: Problem, options: AlOptions | None = None, *, traj: Trajectory | None = None,
             pstate: PenaltyState | None = None, budget: Budget | None = None, return_state: bool = False):
    """Outer multiplier/penalty loop around inexact DDP solves of the penalized cost.

    Controls are kept inside ``problem.u_lo``/``problem.u_hi`` when given.
    With ``return_state`` the final :class:`PenaltyState` is returned too.
    """
    options = options or AlOptions()
    budget = budget or Budget(options.time_budget)
    cmodel = problem.constraints or NoConstraints()
    limited = problem.u_lo is not None or problem.u_hi is not None
    if traj is None:
        traj = rollout(problem.dynamics, problem.x0, problem.initial_controls, u_lo=problem.u_lo, u_hi=problem.u_hi)
    if pstate is None:
        pstate = PenaltyState.initial(problem.horizon, cmodel.w, options.lam0, options.mu0, mu_max=options.mu_max,
                                      growth=options.growth, improvement=options.improvement)
    inner_opts = Options(max_iter=options.inner_max_iter, cost_tol=options.inner_cost_tol, reg=options.reg,
                         line_search=options.line_search)
    gain_fn = control_limited_gain_fn(problem.u_lo, problem.u_hi) if limited else None
    J = total_cost(problem.cost, traj)
    viol = max_violation(cmodel, traj)
    prev_rows = _violation_rows(cmodel, traj)
    history = []
    reason = "max_iter"
    inner_total = 0
    it = 0
    for it in range(1, options.max_iter + 1):
        if budget.exceeded():
            reason = "budget"
            it -= 1
            break
        aug = AugmentedCost(problem.cost, cmodel, pstate)
        inner_budget = Budget(None if options.time_budget is None else max(0.0, options.time_budget - budget.elapsed()))
        traj, inner = solve_unconstrained(problem, inner_opts, traj=traj, cost_model=aug, gain_fn=gain_fn,
                                          clamp=limited, budget=inner_budget)
        inner_total += inner.iterations
        Jn = total_cost(problem.cost, traj)
        viol = max_violation(cmodel, traj)
        dJ = J - Jn
        J = Jn
        history.append({"iter": it, "cost": J, "violation": viol, "inner_iterations": inner.iterations,
                        "inner_exit": inner.exit_reason, "max_mu": float(pstate.mu.max(initial=0.0)),
                        "max_lam": float(pstate.lam.max(initial=0.0))})
        if viol <= options.violation_tol and abs(dJ) < options.cost_tol:
            reason = "converged"
            break
        if cmodel.w:
            G = constraint_values(cmodel, traj)
            rows = _violation_rows(cmodel, traj, G)
            pstate = multiplier_update(pstate, G)
            pstate = penalty_update(pstate, rows, prev_rows)
            prev_rows = rows
    report = SolverReport(cost=J, max_violation=viol, iterations=it, inner_iterations=inner_total,
                          wall_time=budget.elapsed(), exit_reason=reason, solver="al", diagnostics=history)
    if return_state:
        return traj, report, pstate
    return traj, report


def _violation_rows(cmodel, traj, G=None):
    if cmodel.w == 0:
        return np.zeros((traj.horizon + 1, 0))
    G = constraint_values(cmodel, traj) if G is None else G
    return np.where(np.isfinite(G), np.maximum(G, 0.0), 0.0)
