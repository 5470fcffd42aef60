"""Unconstrained DDP / iLQR engine.

Everything the constrained solvers build on lives here: rollouts, cost
totals, quadratic expansions of the Q function, gains, the gain-form value
recursion, regularization scheduling and the line-searched forward pass.

Only first-order dynamics expansions are used (iLQR style); second-order
dynamics tensors are deliberately not supported.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np


class DivergenceError(RuntimeError):
    """A rollout produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state encountered at timestep {step}")
        self.step = step


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Quu is not positive definite after regularization."""


class BackwardPassError(RuntimeError):
    """Regularization reached its upper bound without producing a PD Quu."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """State/control sequences over a horizon of ``N`` steps.

    ``states`` has shape ``(N + 1, n)`` and ``controls`` shape ``(N, m)``.
    """

    states: np.ndarray
    controls: np.ndarray
    dt: float = 1.0
    consistent: bool = False

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim == 1:
            self.controls = self.controls.reshape(-1, 1)
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError(
                f"expected {self.controls.shape[0] + 1} states for "
                f"{self.controls.shape[0]} controls, got {self.states.shape[0]}"
            )

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.controls.shape[1]

    def copy(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.controls.copy(), self.dt, self.consistent)


@dataclass
class QExpansion:
    """Second-order model of the Q function about the nominal at one step."""

    Qx: np.ndarray
    Qu: np.ndarray
    Qxx: np.ndarray
    Qux: np.ndarray
    Quu: np.ndarray

    @property
    def Qxu(self) -> np.ndarray:
        return self.Qux.T

    def copy(self) -> "QExpansion":
        return QExpansion(*(a.copy() for a in (self.Qx, self.Qu, self.Qxx, self.Qux, self.Quu)))


@dataclass
class ValueExpansion:
    V: float
    Vx: np.ndarray
    Vxx: np.ndarray


@dataclass
class GainSchedule:
    """Feedforward ``k`` (N, m) and feedback ``K`` (N, m, n) gains."""

    k: np.ndarray
    K: np.ndarray

    def __len__(self) -> int:
        return self.k.shape[0]


@dataclass
class RegState:
    """Levenberg-Marquardt style regularizers and their schedule.

    ``nu1`` regularizes the next-step value Hessian (state side), ``nu2`` is
    added to Quu directly (control side). Both move together.
    """

    nu1: float = 1e-6
    nu2: float = 1e-6
    scale_up: float = 10.0
    scale_down: float = 10.0
    nu_min: float = 1e-6
    nu_max: float = 1e10

    @property
    def exhausted(self) -> bool:
        return max(self.nu1, self.nu2) >= self.nu_max


@dataclass
class SolverReport:
    """Summary of one solver run.

    ``max_violation`` is the largest positive part of any inequality over the
    returned trajectory, ``max_defect`` the largest dynamics residual.
    """

    cost: float
    max_violation: float = 0.0
    max_defect: float = 0.0
    iterations: int = 0
    inner_iterations: int = 0
    wall_time: float = 0.0
    exit_reason: str = "max_iter"
    solver: str = ""
    diagnostics: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.exit_reason == "converged"


@dataclass
class Problem:
    """A discrete-time optimal control problem.

    ``constraints`` is optional; ``u_lo``/``u_hi`` describe a control box
    used by the control-limited solvers.
    """

    dynamics: Any
    cost: Any
    x0: np.ndarray
    horizon: int
    constraints: Any = None
    initial_controls: Optional[np.ndarray] = None
    u_lo: Optional[np.ndarray] = None
    u_hi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if self.x0.shape != (self.dynamics.n,):
            raise ValueError(f"x0 must have shape ({self.dynamics.n},), got {self.x0.shape}")
        if self.initial_controls is None:
            self.initial_controls = np.zeros((self.horizon, self.dynamics.m))
        else:
            U = np.asarray(self.initial_controls, dtype=float).reshape(self.horizon, self.dynamics.m)
            self.initial_controls = U
        for name in ("u_lo", "u_hi"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.broadcast_to(np.asarray(val, dtype=float), (self.dynamics.m,)).copy())
        if self.u_lo is not None and self.u_hi is not None and np.any(self.u_lo > self.u_hi):
            raise ValueError("empty control box: u_lo > u_hi")

    @property
    def dt(self) -> float:
        return float(self.dynamics.dt)

    def with_(self, **changes) -> "Problem":
        return replace(self, **changes)


@dataclass
class Options:
    """Outer-loop settings shared by every DDP-family solver."""

    max_iter: int = 15
    cost_tol: float = 8e-2
    violation_tol: float = 1e-7
    time_budget: Optional[float] = None
    reg: RegState = field(default_factory=RegState)
    line_search: tuple = tuple(0.5 ** i for i in range(11))


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def rollout(dynamics, x0, controls, *, u_lo=None, u_hi=None) -> Trajectory:
    """Propagate ``x0`` through the dynamics under the given controls."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls.reshape(-1, dynamics.m)
    x0 = np.asarray(x0, dtype=float)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(controls))):
        raise ValueError("x0 and controls must be finite")
    if u_lo is not None or u_hi is not None:
        controls = np.clip(controls, u_lo, u_hi)
    N = controls.shape[0]
    X = np.empty((N + 1, x0.shape[0]))
    X[0] = x0
    for k in range(N):
        X[k + 1] = dynamics.step(X[k], controls[k])
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergenceError(k + 1)
    return Trajectory(X, controls.copy(), float(dynamics.dt), consistent=True)


def total_cost(cost_model, traj: Trajectory) -> float:
    """Running costs summed over the horizon plus the terminal cost."""
    X, U = traj.states, traj.controls
    if X.shape[1] != cost_model.n or U.shape[1] != cost_model.m:
        raise ValueError(
            f"trajectory dims (n={X.shape[1]}, m={U.shape[1]}) do not match "
            f"cost model (n={cost_model.n}, m={cost_model.m})"
        )
    J = 0.0
    for k in range(traj.horizon):
        J += cost_model.running(X[k], U[k], k)
    return float(J + cost_model.terminal(X[-1]))


def dynamics_defect(dynamics, traj: Trajectory) -> float:
    """Largest infinity-norm residual ``x[k+1] - f(x[k], u[k])``."""
    worst = 0.0
    for k in range(traj.horizon):
        r = traj.states[k + 1] - dynamics.step(traj.states[k], traj.controls[k])
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def q_expansion(l_derivs, fx, fu, nxt: ValueExpansion) -> QExpansion:
    """Assemble Q derivatives from cost derivatives and the next value model.

    ``l_derivs`` is ``(l, lx, lu, lxx, lux, luu)``.
    """
    _, lx, lu, lxx, lux, luu = l_derivs
    fxT_Vxx = fx.T @ nxt.Vxx
    fuT_Vxx = fu.T @ nxt.Vxx
    return QExpansion(
        Qx=lx + fx.T @ nxt.Vx,
        Qu=lu + fu.T @ nxt.Vx,
        Qxx=lxx + fxT_Vxx @ fx,
        Qux=lux + fuT_Vxx @ fx,
        Quu=luu + fuT_Vxx @ fu,
    )


def regularized_q(l_derivs, fx, fu, nxt: ValueExpansion, reg: RegState, *, check: bool = True) -> QExpansion:
    """Q expansion with ``nu1`` on the next value Hessian and ``nu2`` on Quu.

    Raises :class:`NotPositiveDefiniteError` when the regularized Quu is not
    positive definite, so the caller can raise the regularizers and retry.
    """
    if reg.nu1 < 0 or reg.nu2 < 0:
        raise ValueError("regularizers must be nonnegative")
    n = fx.shape[0]
    Vreg = nxt.Vxx + reg.nu1 * np.eye(n) if reg.nu1 else nxt.Vxx
    q = q_expansion(l_derivs, fx, fu, ValueExpansion(nxt.V, nxt.Vx, Vreg))
    # Qx keeps the unregularized gradient; only curvature terms are damped.
    if reg.nu2:
        q.Quu = q.Quu + reg.nu2 * np.eye(q.Quu.shape[0])
    q.Quu = 0.5 * (q.Quu + q.Quu.T)
    q.Qxx = 0.5 * (q.Qxx + q.Qxx.T)
    if check and q.Quu.size:
        try:
            np.linalg.cholesky(q.Quu)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("Quu not positive definite") from exc
    return q


def unconstrained_gains(q: QExpansion):
    """``k = -Quu^-1 Qu`` and ``K = -Quu^-1 Qux``."""
    try:
        L = np.linalg.cholesky(q.Quu)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("singular or indefinite Quu") from exc
    rhs = np.column_stack([q.Qu, q.Qux])
    sol = _chol_solve(L, rhs)
    return -sol[:, 0], -sol[:, 1:]


def value_recursion(q: QExpansion, k, K) -> ValueExpansion:
    """Gain-form value update, valid for any (k, K), not only the optimal ones.

    The scalar ``V`` carries the expected change ``k'Qu + 1/2 k'Quu k``.
    """
    KtQuu = K.T @ q.Quu
    Vx = q.Qx + KtQuu @ k + K.T @ q.Qu + q.Qux.T @ k
    Vxx = q.Qxx + KtQuu @ K + K.T @ q.Qux + q.Qux.T @ K
    Vxx = 0.5 * (Vxx + Vxx.T)
    dV = float(k @ q.Qu + 0.5 * k @ q.Quu @ k)
    return ValueExpansion(dV, Vx, Vxx)


def regularization_schedule(reg: RegState, accepted: bool) -> RegState:
    """Decrease both regularizers after an accepted step, increase otherwise."""
    if accepted:
        f = lambda v: max(reg.nu_min, v / reg.scale_down)  # noqa: E731
    else:
        f = lambda v: min(reg.nu_max, max(v, reg.nu_min, 1e-12) * reg.scale_up)  # noqa: E731
    return replace(reg, nu1=f(reg.nu1), nu2=f(reg.nu2))


def _chol_solve(L, b):
    from scipy.linalg import solve_triangular

    y = solve_triangular(L, b, lower=True, check_finite=False)
    return solve_triangular(L.T, y, lower=False, check_finite=False)


# ---------------------------------------------------------------------------
# Backward / forward passes
# ---------------------------------------------------------------------------


@dataclass
class Linearization:
    """Per-step dynamics Jacobians and cost derivatives along a trajectory."""

    fx: list
    fu: list
    l_derivs: list
    terminal: tuple


def linearize(dynamics, cost_model, traj: Trajectory) -> Linearization:
    fx, fu, ld = [], [], []
    for k in range(traj.horizon):
        A, B = dynamics.jacobians(traj.states[k], traj.controls[k])
        fx.append(A)
        fu.append(B)
        ld.append(cost_model.running_derivs(traj.states[k], traj.controls[k], k))
    return Linearization(fx, fu, ld, cost_model.terminal_derivs(traj.states[-1]))


@dataclass
class BackwardResult:
    gains: GainSchedule
    expected: tuple
    reg: RegState
    q: list
    values: list


def ddp_backward_pass(traj: Trajectory, dynamics, cost_model, reg: RegState, lin: Linearization | None = None,
                      gain_fn=None) -> BackwardResult:
    """Standard DDP backward pass with automatic regularization retries.

    ``gain_fn(k, q, traj)`` may override the gain computation (used by the
    control-limited variant); it returns ``(k, K)``.
    """
    if lin is None:
        lin = linearize(dynamics, cost_model, traj)
    N, n, m = traj.horizon, traj.n, traj.m
    gain_fn = gain_fn or (lambda step, q, _traj: unconstrained_gains(q))
    while True:
        try:
            return _ddp_backward_once(traj, lin, reg, gain_fn, N, n, m)
        except NotPositiveDefiniteError:
            if reg.exhausted:
                raise BackwardPassError("Quu regularization failed at nu_max") from None
            reg = regularization_schedule(reg, accepted=False)


def _ddp_backward_once(traj, lin, reg, gain_fn, N, n, m):
    phi, phix, phixx = lin.terminal
    nxt = ValueExpansion(float(phi), np.asarray(phix, float), np.asarray(phixx, float))
    ks = np.zeros((N, m))
    Ks = np.zeros((N, m, n))
    qs = [None] * N
    values = [None] * (N + 1)
    values[N] = nxt
    dV1 = dV2 = 0.0
    for k in range(N - 1, -1, -1):
        q = regularized_q(lin.l_derivs[k], lin.fx[k], lin.fu[k], nxt, reg)
        kk, KK = gain_fn(k, q, traj)
        ks[k], Ks[k] = kk, KK
        dV1 += float(kk @ q.Qu)
        dV2 += float(0.5 * kk @ q.Quu @ kk)
        nxt = value_recursion(q, kk, KK)
        qs[k] = q
        values[k] = nxt
    return BackwardResult(GainSchedule(ks, Ks), (dV1, dV2), reg, qs, values)


def ddp_forward_pass(traj: Trajectory, gains: GainSchedule, alpha: float, dynamics, cost_model,
                     *, u_lo=None, u_hi=None):
    """Apply ``u = u_bar + alpha k + K (x - x_bar)`` and roll out.

    Returns ``(trajectory, cost)``; a divergent rollout raises
    :class:`DivergenceError` so the caller can reject the step.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    N = traj.horizon
    X = np.empty_like(traj.states)
    U = np.empty_like(traj.controls)
    X[0] = traj.states[0]
    for k in range(N):
        u = traj.controls[k] + alpha * gains.k[k] + gains.K[k] @ (X[k] - traj.states[k])
        if u_lo is not None or u_hi is not None:
            u = np.clip(u, u_lo, u_hi)
        U[k] = u
        X[k + 1] = dynamics.step(X[k], u)
        if not np.all(np.isfinite(X[k + 1])):
            raise DivergenceError(k + 1)
    new = Trajectory(X, U, traj.dt, consistent=True)
    return new, total_cost(cost_model, new)


def line_search(traj, J, gains, dynamics, cost_model, alphas, *, u_lo=None, u_hi=None):
    """First step size in ``alphas`` giving a strict cost decrease, else ``None``."""
    for a in alphas:
        try:
            cand, Jc = ddp_forward_pass(traj, gains, a, dynamics, cost_model, u_lo=u_lo, u_hi=u_hi)
        except DivergenceError:
            continue
        if np.isfinite(Jc) and Jc < J:
            return cand, Jc, a
    return None


class Budget:
    """Wall-clock budget checked between outer iterations."""

    def __init__(self, seconds=None):
        self.seconds = seconds
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start

    def exceeded(self) -> bool:
        return self.seconds is not None and self.elapsed() >= self.seconds


def solve_unconstrained(problem: Problem, options: Options | None = None, *, traj: Trajectory | None = None,
                        cost_model=None, gain_fn=None, clamp: bool = False, budget: Budget | None = None):
    """Iterate DDP backward/forward passes until the cost stops changing.

    ``cost_model`` overrides ``problem.cost`` (the augmented-Lagrangian solver
    passes its penalized cost here). ``clamp`` clips forward-pass controls
    into ``problem.u_lo``/``problem.u_hi``.
    """
    options = options or Options()
    budget = budget or Budget(options.time_budget)
    cost_model = cost_model or problem.cost
    dyn = problem.dynamics
    lo, hi = (problem.u_lo, problem.u_hi) if clamp else (None, None)
    if traj is None:
        traj = rollout(dyn, problem.x0, problem.initial_controls, u_lo=lo, u_hi=hi)
    J = total_cost(cost_model, traj)
    reg = replace(options.reg)
    history = []
    reason = "max_iter"
    it = 0
    for it in range(1, options.max_iter + 1):
        if budget.exceeded():
            reason = "budget"
            it -= 1
            break
        try:
            bw = ddp_backward_pass(traj, dyn, cost_model, reg, gain_fn=gain_fn)
        except BackwardPassError:
            reason = "backward_failure"
            break
        reg = bw.reg
        dV1, dV2 = bw.expected
        if -(dV1 + dV2) < options.cost_tol:
            history.append({"iter": it, "cost": J, "accepted": False, "nu1": reg.nu1, "nu2": reg.nu2})
            reason = "converged"
            break
        found = line_search(traj, J, bw.gains, dyn, cost_model, options.line_search, u_lo=lo, u_hi=hi)
        if found is None:
            reg = regularization_schedule(reg, accepted=False)
            history.append({"iter": it, "cost": J, "accepted": False, "nu1": reg.nu1, "nu2": reg.nu2})
            if reg.exhausted:
                reason = "regularization_exhausted"
                break
            continue
        traj, Jn, alpha = found
        dJ = J - Jn
        J = Jn
        reg = regularization_schedule(reg, accepted=True)
        history.append({"iter": it, "cost": J, "accepted": True, "alpha": alpha, "nu1": reg.nu1, "nu2": reg.nu2})
        if abs(dJ) < options.cost_tol:
            reason = "converged"
            break
    report = SolverReport(cost=J, iterations=it, exit_reason=reason, solver="ddp",
                          wall_time=budget.elapsed(), diagnostics=history)
    return traj, report
