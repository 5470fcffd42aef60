"""Slack-variable KKT DDP (S-KKT) and the active-set baseline.

At every backward step the constrained subproblem

    min_du  Q(du)   s.t.  g + C du + D dx <= 0

is handled with slacks ``s`` and multipliers ``lam``: a small primal-dual
interior-point loop is run on the nominal (``dx = 0``) system, then
feedback gains are read off the perturbed system. The forward pass solves
one QP per step on the re-linearized constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import (
    BackwardPassError,
    Budget,
    GainSchedule,
    NotPositiveDefiniteError,
    Options,
    Problem,
    SolverReport,
    Trajectory,
    ValueExpansion,
    linearize,
    regularization_schedule,
    regularized_q,
    rollout,
    total_cost,
    unconstrained_gains,
    value_recursion,
)
from .models import ConstraintLinearization, NoConstraints, max_violation, propagate_constraints
from .qp import QpError, QpProblem, phase_one, solve_qp


class ForwardPassError(RuntimeError):
    """The trust region collapsed before a feasible rollout was found."""


@dataclass
class SkktOptions(Options):
    eps: float = 1e-4
    zeta: float = 0.99
    eta: float = 0.5
    mu_ratio: float = 0.01
    inner_max_iter: int = 30
    delta0: float | None = None
    delta_min: float = 1e-8
    max_restarts: int = 30
    active_threshold: float = 1e-3


# ---------------------------------------------------------------------------
# Interior-point pieces
# ---------------------------------------------------------------------------


@dataclass
class SlackDualState:
    s: np.ndarray
    lam: np.ndarray

    @property
    def w(self) -> int:
        return self.s.size

    def copy(self) -> "SlackDualState":
        return SlackDualState(self.s.copy(), self.lam.copy())


@dataclass
class KktStep:
    du: np.ndarray
    ds: np.ndarray
    dlam: np.ndarray
    dp: np.ndarray
    dq: np.ndarray


@dataclass
class ConstrainedGains:
    k: np.ndarray
    K: np.ndarray
    E: np.ndarray
    F: np.ndarray
    M: np.ndarray
    H: np.ndarray


def init_slack_dual(g, eps: float = 1e-4) -> SlackDualState:
    """``s = max(-g, eps)``, ``lam = 1``; violated rows get ``s = eps``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    g = np.asarray(g, dtype=float)
    return SlackDualState(np.maximum(-g, eps), np.ones_like(g))


def duality_measure(state: SlackDualState) -> float:
    if state.w == 0:
        raise ValueError("duality measure undefined without constraints")
    return float(state.s @ state.lam) / state.w


def centering(state: SlackDualState, mu: float) -> float:
    """``sigma = 0.1 min(0.05 (1 - xi) / xi, 2)^3`` with ``xi = min(s*lam) / mu``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    xi = float(np.min(state.s * state.lam)) / mu
    if xi <= 0:
        return 0.8
    return 0.1 * min(0.05 * (1.0 - xi) / xi, 2.0) ** 3


def solve_kkt_nominal(q, lin: ConstraintLinearization, state: SlackDualState, mu_sigma: float,
                      quu_factor=None) -> KktStep:
    """Analytic solution of the scaled KKT system at ``dx = 0``.

    With ``E = Lam C`` and ``F = Lam S`` the scaled unknowns are
    ``dp = S^-1 ds`` and ``dq = Lam^-1 dlam``.
    """
    Quu, Qu = q.Quu, q.Qu
    fac = quu_factor or cho_factor(Quu)
    if lin.w == 0:
        du = -cho_solve(fac, Qu)
        z = np.zeros(0)
        return KktStep(du, z, z, z, z)
    s, lam = state.s, state.lam
    C, g = lin.C, lin.g
    a = -Qu - C.T @ lam
    b = -s * lam + mu_sigma
    d = -(g + s)
    E = lam[:, None] * C
    F = lam * s
    QiEt = cho_solve(fac, E.T)
    Minv = E @ QiEt + np.diag(F)
    try:
        dq = np.linalg.solve(Minv, E @ cho_solve(fac, a) - lam * d + b)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("singular scaled KKT system") from exc
    dp = (b - F * dq) / F
    du = cho_solve(fac, a - E.T @ dq)
    return KktStep(du, s * dp, lam * dq, dp, dq)


def fraction_to_boundary(state: SlackDualState, ds, dlam, zeta: float = 0.99) -> float:
    """Largest step in (0, 1] keeping ``s`` and ``lam`` strictly positive."""
    if not (0.9 <= zeta < 1.0):
        raise ValueError("zeta must satisfy 0.9 <= zeta < 1")

    def cap(v, dv):
        neg = dv < 0
        if not np.any(neg):
            return 1.0
        return float(min(1.0, np.min(-zeta * v[neg] / dv[neg])))

    return min(cap(state.s, np.asarray(ds)), cap(state.lam, np.asarray(dlam)))


def update_nominal(lin: ConstraintLinearization, q, alpha: float, du_prev):
    """Shift the nominal control by ``alpha * du_prev``: ``g += C a du``, ``Qu += Quu a du``."""
    step = alpha * np.asarray(du_prev)
    lin2 = ConstraintLinearization(lin.g + lin.C @ step, lin.C, lin.D, lin.partition)
    q2 = replace(q, Qu=q.Qu + q.Quu @ step)
    return lin2, q2


@dataclass
class InnerLoopResult:
    state: SlackDualState
    q: object
    lin: ConstraintLinearization
    du: np.ndarray
    iterations: int = 0
    capped: bool = False
    stalled: bool = False
    mu0: float = 0.0
    mu: float = 0.0
    min_s: float = math.inf
    min_lam: float = math.inf

    @property
    def ratio(self) -> float:
        return self.mu / self.mu0 if self.mu0 > 0 else 0.0


def skkt_inner_loop(q, lin: ConstraintLinearization, eps: float = 1e-4, *, zeta: float = 0.99,
                    threshold: float = 0.01, max_iter: int = 30, quu_factor=None,
                    min_step: float = 1e-8) -> InnerLoopResult:
    """Interior-point iterations on the nominal system until ``mu / mu0 <= threshold``.

    The loop also stops early (``stalled``, counted like a cap) when the
    boundary step drops below ``min_step`` or the scaled system turns
    singular, which happens when the linearized rows cannot hold together.
    The last good iterate is kept.
    """
    m = q.Qu.size
    if lin.w == 0:
        return InnerLoopResult(SlackDualState(np.zeros(0), np.zeros(0)), q, lin, np.zeros(m))
    fac = quu_factor or cho_factor(q.Quu)
    state = init_slack_dual(lin.g, eps)
    mu0 = mu = duality_measure(state)
    du_bar = np.zeros(m)
    res = InnerLoopResult(state, q, lin, du_bar, mu0=mu0, mu=mu,
                          min_s=float(state.s.min()), min_lam=float(state.lam.min()))
    it = 0
    while mu / mu0 > threshold:
        if it >= max_iter:
            res.capped = True
            break
        it += 1
        sigma = centering(state, mu)
        try:
            step = solve_kkt_nominal(q, lin, state, mu * sigma, quu_factor=fac)
        except NotPositiveDefiniteError:
            res.capped = res.stalled = True
            break
        alpha = fraction_to_boundary(state, step.ds, step.dlam, zeta)
        if alpha < min_step:
            res.capped = res.stalled = True
            break
        state = SlackDualState(state.s + alpha * step.ds, state.lam + alpha * step.dlam)
        lin, q = update_nominal(lin, q, alpha, step.du)
        du_bar = du_bar + alpha * step.du
        mu = duality_measure(state)
        res.min_s = min(res.min_s, float(state.s.min()))
        res.min_lam = min(res.min_lam, float(state.lam.min()))
    res.state, res.q, res.lin, res.du = state, q, lin, du_bar
    res.iterations, res.mu = it, mu
    return res


def constrained_gains(q, lin: ConstraintLinearization, state: SlackDualState, quu_factor=None) -> ConstrainedGains:
    """Feedforward/feedback gains of the perturbed slack KKT system.

    ``k = -Quu^-1 [H Qu + E'M Lam (g + S e)]``,
    ``K = -Quu^-1 (H Qux + E'M Lam D)`` with ``H = I - E'M E Quu^-1``.
    """
    fac = quu_factor or cho_factor(q.Quu)
    m = q.Qu.size
    if lin.w == 0:
        k = -cho_solve(fac, q.Qu)
        K = -cho_solve(fac, q.Qux)
        z = np.zeros((0, m))
        return ConstrainedGains(k, K, z, np.zeros(0), np.zeros((0, 0)), np.eye(m))
    s, lam = state.s, state.lam
    E = lam[:, None] * lin.C
    F = lam * s
    Minv = E @ cho_solve(fac, E.T) + np.diag(F)
    try:
        M = np.linalg.inv(Minv)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("singular M system") from exc
    Hm = np.eye(m) - E.T @ M @ cho_solve(fac, E.T).T
    EtML = E.T @ M * lam  # E' M Lam
    k = -cho_solve(fac, Hm @ q.Qu + EtML @ (lin.g + s))
    K = -cho_solve(fac, Hm @ q.Qux + EtML @ lin.D)
    return ConstrainedGains(k, K, E, F, M, Hm)


# ---------------------------------------------------------------------------
# Passes
# ---------------------------------------------------------------------------


def constraint_schedule(traj: Trajectory, dynamics, cmodel, lin_dyn) -> list:
    """Propagated constraint linearizations for k = 0..N-1 (position rows dropped at N-1)."""
    N = traj.horizon
    out = []
    for k in range(N):
        fx_next = lin_dyn.fx[k + 1] if k + 1 < N else None
        out.append(propagate_constraints(cmodel, dynamics, traj.states[k], traj.controls[k],
                                         lin_dyn.fx[k], lin_dyn.fu[k], fx_next,
                                         include_position=k < N - 1))
    return out


@dataclass
class SkktBackward:
    gains: GainSchedule
    q: list
    lin: list
    reg: object
    values: list
    stats: dict = field(default_factory=dict)


def skkt_backward_pass(traj: Trajectory, problem: Problem, reg, options: SkktOptions | None = None,
                       cmodel=None) -> SkktBackward:
    """Backward pass with per-step interior-point loops; retries with larger regularizers."""
    options = options or SkktOptions()
    cmodel = cmodel if cmodel is not None else (problem.constraints or NoConstraints())
    dyn, cost = problem.dynamics, problem.cost
    lin_dyn = linearize(dyn, cost, traj)
    clin = constraint_schedule(traj, dyn, cmodel, lin_dyn)
    while True:
        try:
            return _skkt_backward_once(traj, lin_dyn, clin, reg, options)
        except NotPositiveDefiniteError:
            if reg.exhausted:
                raise BackwardPassError("Quu regularization failed at nu_max") from None
            reg = regularization_schedule(reg, accepted=False)


def _skkt_backward_once(traj, lin_dyn, clin, reg, options):
    N, n, m = traj.horizon, traj.n, traj.m
    phi, phix, phixx = lin_dyn.terminal
    nxt = ValueExpansion(float(phi), np.asarray(phix, float), np.asarray(phixx, float))
    ks = np.zeros((N, m))
    Ks = np.zeros((N, m, n))
    qs = [None] * N
    values = [None] * (N + 1)
    values[N] = nxt
    stats = {"loops": 0, "caps": 0, "stalls": 0, "inner_iterations": 0, "min_s": math.inf, "min_lam": math.inf,
             "max_exit_ratio": 0.0, "inner_per_step": [0] * N}
    for k in range(N - 1, -1, -1):
        q = regularized_q(lin_dyn.l_derivs[k], lin_dyn.fx[k], lin_dyn.fu[k], nxt, reg)
        fac = cho_factor(q.Quu)
        lin = clin[k]
        if lin.w:
            inner = skkt_inner_loop(q, lin, options.eps, zeta=options.zeta, threshold=options.mu_ratio,
                                    max_iter=options.inner_max_iter, quu_factor=fac)
            cg = constrained_gains(inner.q, inner.lin, inner.state, quu_factor=fac)
            kk = inner.du + cg.k
            KK = cg.K
            stats["loops"] += 1
            stats["caps"] += int(inner.capped)
            stats["stalls"] += int(inner.stalled)
            stats["inner_iterations"] += inner.iterations
            stats["inner_per_step"][k] = inner.iterations
            stats["min_s"] = min(stats["min_s"], inner.min_s)
            stats["min_lam"] = min(stats["min_lam"], inner.min_lam)
            if not inner.capped:
                stats["max_exit_ratio"] = max(stats["max_exit_ratio"], inner.ratio)
        else:
            kk, KK = unconstrained_gains(q)
        if not (np.all(np.isfinite(kk)) and np.all(np.isfinite(KK))):
            raise NotPositiveDefiniteError("non-finite gains")
        ks[k], Ks[k] = kk, KK
        nxt = value_recursion(q, kk, KK)
        qs[k] = q
        values[k] = nxt
    return SkktBackward(GainSchedule(ks, Ks), qs, clin, reg, values, stats)


def _shifted_box(problem: Problem, u_bar, scale: float):
    """``scale * (u_lo - u_bar) <= du <= scale * (u_hi - u_bar)``, or ``(None, None)``."""
    if problem.u_lo is None and problem.u_hi is None:
        return None, None
    lo = None if problem.u_lo is None else scale * (problem.u_lo - u_bar)
    hi = None if problem.u_hi is None else scale * (problem.u_hi - u_bar)
    # u_bar can sit marginally outside the box after a warm start
    if lo is not None:
        lo = np.minimum(lo, 0.0) if scale < 1 else lo
    if hi is not None:
        hi = np.maximum(hi, 0.0) if scale < 1 else hi
    return lo, hi


def _intersect(lo1, hi1, lo2, hi2):
    lo = lo1 if lo2 is None else (lo2 if lo1 is None else np.maximum(lo1, lo2))
    hi = hi1 if hi2 is None else (hi2 if hi1 is None else np.minimum(hi1, hi2))
    if lo is not None and hi is not None:
        lo = np.minimum(lo, hi)
    return lo, hi


def step_qp(H, lin_term, A, b, lo=None, hi=None, *, relax: bool = False):
    """Per-step forward QP; returns ``(du, status)``.

    With ``relax`` an infeasible instance is re-solved with every inequality
    loosened by the smallest uniform amount that makes it feasible.
    """
    prob = QpProblem(H, lin_term, A, b, lo, hi)
    sol = solve_qp(prob)
    if sol.optimal or not relax:
        return sol.z, sol.status
    m = lin_term.size
    if prob.A.shape[0] == 0:
        return sol.z, sol.status
    # minimize max row violation with the box held exactly
    Gb = [np.eye(m), -np.eye(m)]
    hb = [np.full(m, np.inf) if hi is None else hi, np.full(m, np.inf) if lo is None else -lo]
    G = np.vstack([prob.A] + Gb)
    h = np.concatenate([prob.b] + hb)
    finite = np.isfinite(h)
    G, h = G[finite], h[finite]
    nA = prob.A.shape[0]
    nbox = G.shape[0] - nA
    # box rows get a huge weight so the relaxation lands on the A rows only
    Gt = np.hstack([G, -np.concatenate([np.ones(nA), np.zeros(nbox)])[:, None]])
    from scipy.optimize import linprog

    c = np.zeros(m + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=Gt, b_ub=h, bounds=[(None, None)] * m + [(0, None)], method="highs")
    t = float(res.x[-1]) if res.status == 0 else float(phase_one(prob.A, prob.b)[1])
    prob2 = QpProblem(H, lin_term, A, b + t * (1 + 1e-9) + 1e-12, lo, hi)
    sol2 = solve_qp(prob2)
    return sol2.z, "relaxed" if sol2.optimal else sol2.status


@dataclass
class ForwardInfo:
    restarts: int = 0
    terminal_shrinks: int = 0
    relaxed_steps: int = 0
    scale: float = 1.0


def skkt_forward_pass(traj: Trajectory, problem: Problem, qs: list, options: SkktOptions | None = None,
                      cmodel=None, *, control_box: bool = False, row_selector=None, alpha: float = 1.0):
    """QP forward pass with terminal trust region and restart-on-infeasibility.

    ``control_box`` adds the shifted control limits of ``problem`` to every
    QP; on an infeasible step the limits are scaled by ``eta`` and the pass
    restarts from the first step. ``row_selector(lin)`` may replace the
    inequality rows (the active-set baseline turns near-active rows into
    equalities through it). ``alpha`` scales the gradient term ``Qu`` the
    way a line-search step scales the feedforward gain. Returns
    ``(trajectory, ForwardInfo)``.
    """
    options = options or SkktOptions()
    cmodel = cmodel if cmodel is not None else (problem.constraints or NoConstraints())
    dyn = problem.dynamics
    N = traj.horizon
    Xb, Ub = traj.states, traj.controls
    eta = options.eta
    delta0 = options.delta0
    if delta0 is None:
        delta0 = 10.0 * max(float(np.max(np.abs(Ub), initial=0.0)), 1.0)
    info = ForwardInfo()
    nominal_terminal = float(max(0.0, np.max(cmodel.state_rows(Xb[-1]), initial=0.0)))

    scale = 1.0
    trust = None  # per-step trust box, only after a non-terminal failure in plain mode
    while True:
        X = np.empty_like(Xb)
        U = np.empty_like(Ub)
        X[0] = Xb[0]
        failed = False
        last_try = info.restarts >= options.max_restarts
        for k in range(N - 1):
            dx = X[k] - Xb[k]
            q = qs[k]
            lin = propagate_constraints(cmodel, dyn, X[k], Ub[k], include_position=True)
            A, b, eq = _rows(lin, row_selector)
            lo, hi = _shifted_box(problem, Ub[k], scale) if control_box else (None, None)
            if trust is not None:
                lo, hi = _intersect(lo, hi, -trust, trust)
            du, status = _solve_step(q.Quu, alpha * q.Qu + q.Qux @ dx, A, b, eq, lo, hi, relax=last_try)
            if status == "relaxed":
                info.relaxed_steps += 1
            elif status != "optimal":
                failed = True
                break
            U[k] = _clip_box(problem, Ub[k] + du) if control_box else Ub[k] + du
            X[k + 1] = dyn.step(X[k], U[k])
            if not np.all(np.isfinite(X[k + 1])):
                failed = True
                break
        if failed:
            info.restarts += 1
            if control_box:
                scale *= eta
            else:
                trust = np.full(traj.m, delta0) if trust is None else trust
                trust = trust * eta
            if info.restarts > options.max_restarts:
                raise ForwardPassError("non-terminal QP infeasible after repeated shrinking")
            continue
        break

    # terminal step: trust region on du, shrink until the final state is feasible
    k = N - 1
    dx = X[k] - Xb[k]
    q = qs[k]
    lin = propagate_constraints(cmodel, dyn, X[k], Ub[k], include_position=False)
    A, b, eq = _rows(lin, row_selector)
    delta = np.full(traj.m, delta0)
    allowed = max(nominal_terminal, 0.0)
    while True:
        lo, hi = -delta, delta
        if control_box:
            lo, hi = _intersect(lo, hi, *_shifted_box(problem, Ub[k], scale))
        du, status = _solve_step(q.Quu, alpha * q.Qu + q.Qux @ dx, A, b, eq, lo, hi, relax=True)
        if status not in ("optimal", "relaxed"):
            du = np.zeros(traj.m)
        u = _clip_box(problem, Ub[k] + du) if control_box else Ub[k] + du
        xN = dyn.step(X[k], u)
        viol = float(np.max(cmodel.state_rows(xN), initial=-np.inf))
        if viol <= allowed or np.all(delta < options.delta_min):
            break
        delta = eta * delta
        info.terminal_shrinks += 1
    U[k] = u
    X[N] = xN
    if not np.all(np.isfinite(X)):
        raise ForwardPassError("non-finite state in forward pass")
    info.scale = scale
    return Trajectory(X, U, traj.dt, consistent=True), info


def _rows(lin, row_selector):
    if row_selector is None:
        return lin.C, -lin.g, False
    return row_selector(lin)


def _solve_step(H, lin_term, A, b, eq, lo, hi, relax):
    try:
        if eq:
            return _equality_qp(H, lin_term, A, b, lo, hi)
        return step_qp(H, lin_term, A, b, lo, hi, relax=relax)
    except QpError:
        # degenerate rows that the QP cannot resolve count as a failed step
        return np.zeros(lin_term.size), "failed"



def _clip_box(problem, u):
    lo = -np.inf if problem.u_lo is None else problem.u_lo
    hi = np.inf if problem.u_hi is None else problem.u_hi
    return np.clip(u, lo, hi)


# ---------------------------------------------------------------------------
# Active-set baseline
# ---------------------------------------------------------------------------


def independent_rows(C, tol: float = 1e-9):
    """Greedy selection of linearly independent rows of ``C``."""
    keep = []
    basis = np.zeros((0, C.shape[1]))
    for i, row in enumerate(C):
        cand = np.vstack([basis, row])
        if np.linalg.matrix_rank(cand, tol=tol * max(1.0, np.abs(cand).max())) > basis.shape[0]:
            keep.append(i)
            basis = cand
        if basis.shape[0] == C.shape[1]:
            break
    return keep


def _equality_qp(H, lin_term, A, b, lo=None, hi=None):
    """``min 1/2 z'Hz + lin'z`` with ``A z = b``; dependent rows dropped, box enforced by clipping."""
    m = lin_term.size
    keep = independent_rows(A) if A.shape[0] else []
    A, b = A[keep], b[keep]
    nw = A.shape[0]
    if nw:
        Kmat = np.block([[H, A.T], [A, np.zeros((nw, nw))]])
        z = np.linalg.solve(Kmat, np.concatenate([-lin_term, b]))[:m]
    else:
        z = -np.linalg.solve(H, lin_term)
    if lo is not None or hi is not None:
        z = np.clip(z, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    return z, "optimal"


def active_set_gains(q, lin: ConstraintLinearization, threshold: float = 1e-3):
    """Gains with near-active rows (``g >= -threshold``) held as ``C du + D dx = 0``."""
    m = q.Qu.size
    act = np.flatnonzero(lin.g >= -threshold) if lin.w else np.zeros(0, int)
    C = lin.C[act] if act.size else np.zeros((0, m))
    D = lin.D[act] if act.size else np.zeros((0, q.Qux.shape[1]))
    keep = independent_rows(C) if C.shape[0] else []
    C, D = C[keep], D[keep]
    nw = C.shape[0]
    if nw == 0:
        return unconstrained_gains(q)
    Kmat = np.block([[q.Quu, C.T], [C, np.zeros((nw, nw))]])
    rhs = np.vstack([np.column_stack([-q.Qu, -q.Qux]), np.column_stack([np.zeros(nw), -D])])
    sol = np.linalg.solve(Kmat, rhs)[:m]
    return sol[:, 0], sol[:, 1:]


def active_set_backward(traj: Trajectory, problem: Problem, reg, options: SkktOptions | None = None,
                        cmodel=None) -> SkktBackward:
    options = options or SkktOptions()
    cmodel = cmodel if cmodel is not None else (problem.constraints or NoConstraints())
    dyn, cost = problem.dynamics, problem.cost
    lin_dyn = linearize(dyn, cost, traj)
    clin = constraint_schedule(traj, dyn, cmodel, lin_dyn)
    N, n, m = traj.horizon, traj.n, traj.m
    while True:
        try:
            phi, phix, phixx = lin_dyn.terminal
            nxt = ValueExpansion(float(phi), np.asarray(phix, float), np.asarray(phixx, float))
            ks, Ks, qs = np.zeros((N, m)), np.zeros((N, m, n)), [None] * N
            values = [None] * (N + 1)
            values[N] = nxt
            for k in range(N - 1, -1, -1):
                q = regularized_q(lin_dyn.l_derivs[k], lin_dyn.fx[k], lin_dyn.fu[k], nxt, reg)
                kk, KK = active_set_gains(q, clin[k], options.active_threshold)
                ks[k], Ks[k], qs[k] = kk, KK, q
                nxt = value_recursion(q, kk, KK)
                values[k] = nxt
            return SkktBackward(GainSchedule(ks, Ks), qs, clin, reg, values, {})
        except NotPositiveDefiniteError:
            if reg.exhausted:
                raise BackwardPassError("Quu regularization failed at nu_max") from None
            reg = regularization_schedule(reg, accepted=False)


def _active_selector(threshold):
    def select(lin):
        m = lin.C.shape[1]
        if lin.w == 0:
            return np.zeros((0, m)), np.zeros(0), True
        act = np.flatnonzero(lin.g >= -threshold)
        return lin.C[act], -lin.g[act], True

    return select


# ---------------------------------------------------------------------------
# Outer loops
# ---------------------------------------------------------------------------


def accept_candidate(J, viol, Jc, viol_c, tol) -> bool:
    """Cost must drop without pushing the violation above ``max(tol, viol)``.

    While the nominal is infeasible, any strict reduction of the violation is
    also accepted so that infeasible warm starts can be repaired.
    """
    if not np.isfinite(Jc):
        return False
    if Jc < J and viol_c <= max(tol, viol):
        return True
    return viol > tol and viol_c < viol


def run_constrained(problem: Problem, options: SkktOptions, backward, *, solver_name: str,
                    traj: Trajectory | None = None, cmodel=None, control_box: bool = False,
                    row_selector=None, budget: Budget | None = None, on_iteration=None):
    """Shared outer loop of S-KKT and the active-set baseline.

    ``on_iteration(record)`` is called after every non-final iteration; a
    truthy return value stops the loop with exit reason ``"stalled"``.
    """
    budget = budget or Budget(options.time_budget)
    cmodel = cmodel if cmodel is not None else (problem.constraints or NoConstraints())
    dyn, cost = problem.dynamics, problem.cost
    if traj is None:
        traj = rollout(dyn, problem.x0, problem.initial_controls)
    J = total_cost(cost, traj)
    viol = max_violation(cmodel, traj)
    reg = replace(options.reg)
    history = []
    reason = "max_iter"
    inner_total = 0
    it = 0
    for it in range(1, options.max_iter + 1):
        if budget.exceeded():
            reason = "budget"
            it -= 1
            break
        try:
            bw = backward(traj, problem, reg, options, cmodel)
        except BackwardPassError:
            reason = "backward_failure"
            break
        reg = bw.reg
        inner_total += bw.stats.get("inner_iterations", 0)
        record = {"iter": it, "nu1": reg.nu1, "nu2": reg.nu2, **{k: v for k, v in bw.stats.items()}}
        cand = finfo = None
        Jc = viol_c = math.inf
        accepted = False
        for alpha in options.line_search:
            try:
                c, fi = skkt_forward_pass(traj, problem, bw.q, options, cmodel, control_box=control_box,
                                          row_selector=row_selector, alpha=alpha)
            except ForwardPassError:
                continue
            cand, finfo = c, fi
            Jc, viol_c = total_cost(cost, c), max_violation(cmodel, c)
            if accept_candidate(J, viol, Jc, viol_c, options.violation_tol):
                accepted = True
                record["alpha"] = alpha
                break
        record.update(candidate_cost=Jc, candidate_violation=viol_c, accepted=accepted,
                      restarts=getattr(finfo, "restarts", None), terminal_shrinks=getattr(finfo, "terminal_shrinks", None))
        done = False
        if accepted:
            dJ = J - Jc
            traj, J, viol = cand, Jc, viol_c
            reg = regularization_schedule(reg, accepted=True)
            done = abs(dJ) < options.cost_tol and viol <= options.violation_tol
        else:
            reg = regularization_schedule(reg, accepted=False)
        record.update(cost=J, violation=viol)
        history.append(record)
        if done:
            reason = "converged"
            break
        if on_iteration is not None and on_iteration(record):
            reason = "stalled"
            break
        if not accepted and reg.exhausted:
            reason = "regularization_exhausted"
            break
    report = SolverReport(cost=J, max_violation=viol, iterations=it, inner_iterations=inner_total,
                          wall_time=budget.elapsed(), exit_reason=reason, solver=solver_name, diagnostics=history)
    return traj, report


def solve_skkt(problem: Problem, options: SkktOptions | None = None, *, traj: Trajectory | None = None,
               control_box: bool = False, budget: Budget | None = None, on_iteration=None):
    """S-KKT outer loop: backward pass, QP forward pass, accept/reject, regularize."""
    options = options or SkktOptions()
    cmodel = problem.constraints or NoConstraints()
    if control_box and (problem.u_lo is not None or problem.u_hi is not None):
        from .models import ControlBox, StackedConstraints

        lo = problem.u_lo if problem.u_lo is not None else np.full(problem.dynamics.m, -np.inf)
        hi = problem.u_hi if problem.u_hi is not None else np.full(problem.dynamics.m, np.inf)
        cmodel = StackedConstraints(cmodel, ControlBox(lo, hi))
    return run_constrained(problem, options, skkt_backward_pass, solver_name="skkt", traj=traj, cmodel=cmodel,
                           control_box=control_box, budget=budget, on_iteration=on_iteration)


def solve_active_set(problem: Problem, options: SkktOptions | None = None, *, traj: Trajectory | None = None,
                     budget: Budget | None = None):
    """Baseline: near-active constraints treated as equalities, no slacks."""
    options = options or SkktOptions()
    return run_constrained(problem, options, active_set_backward, solver_name="active_set", traj=traj,
                           row_selector=_active_selector(options.active_threshold), budget=budget)
