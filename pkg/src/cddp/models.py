"""Benchmark dynamics, quadratic costs and inequality-constraint models.

States are split into a position-like block ``x^p`` whose next value depends
on the state only, and a velocity-like block ``x^v`` that the control drives
directly. Constraint rows are grouped the same way:

* ``g^p`` rows depend on the position block only and are propagated two
  steps ahead so that the control at step k shows up in them;
* ``g^v`` rows depend on the state and are propagated one step ahead;
* ``g^c`` rows depend on the control and are used as they are.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def fd_jacobians(model, x, u, h: float = 1e-6):
    """Central-difference Jacobians ``(fx, fu)`` of ``model.step``.

    The step for component ``i`` is ``h * max(1, |z_i|)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    fx = np.empty((n, n))
    fu = np.empty((n, m))
    for i in range(n):
        d = h * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = d
        fx[:, i] = (model.step(x + e, u) - model.step(x - e, u)) / (2 * d)
    for j in range(m):
        d = h * max(1.0, abs(u[j]))
        e = np.zeros(m)
        e[j] = d
        fu[:, j] = (model.step(x, u + e) - model.step(x, u - e)) / (2 * d)
    return fx, fu


class DynamicsModel:
    """Discrete dynamics ``x[k+1] = f(x[k], u[k])``.

    Subclasses set ``n``, ``m``, ``dt``, ``position_index`` and implement
    :meth:`step`. :meth:`jacobians` defaults to central differences.
    """

    n: int
    m: int
    dt: float
    position_index: np.ndarray
    name = "dynamics"

    @property
    def velocity_index(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n), self.position_index)

    def step(self, x, u):
        raise NotImplementedError

    def jacobians(self, x, u):
        return fd_jacobians(self, x, u)

    def position_step(self, x):
        """``f^p(x)``: next position block, a function of the state only."""
        return self.step(x, np.zeros(self.m))[self.position_index]


def dynamics_step(model, x, u):
    return model.step(np.asarray(x, dtype=float), np.asarray(u, dtype=float))


class LinearDynamics(DynamicsModel):
    """``x' = A x + B u``; handy for LQR oracles."""

    name = "linear"

    def __init__(self, A, B, dt: float = 1.0, position_index=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.n, self.m = self.B.shape
        self.dt = dt
        if position_index is None:
            # rows of A.B untouched by u behave like positions
            position_index = np.flatnonzero(np.all(self.B == 0, axis=1))
        self.position_index = np.asarray(position_index, dtype=int)

    def step(self, x, u):
        return self.A @ x + self.B @ u

    def jacobians(self, x, u):
        return self.A.copy(), self.B.copy()


def double_integrator(dt: float = 0.1) -> LinearDynamics:
    """Scalar double integrator ``p' = p + dt v``, ``v' = v + dt u``."""
    return LinearDynamics([[1.0, dt], [0.0, 1.0]], [[0.0], [dt]], dt=dt, position_index=[0])


class Car2D(DynamicsModel):
    """Simplified car: state ``[x, y, theta, v]``, control ``[u_theta, u_v]``.

    ``theta`` is measured from the y axis, so ``theta = 0`` drives along +y.
    """

    name = "car"
    n, m = 4, 2

    def __init__(self, dt: float = 0.02):
        self.dt = dt
        self.position_index = np.array([0, 1])

    def step(self, x, u):
        px, py, th, v = x
        dt = self.dt
        return np.array([
            px + v * np.sin(th) * dt,
            py + v * np.cos(th) * dt,
            th + u[0] * v * dt,
            v + u[1] * dt,
        ])

    def jacobians(self, x, u):
        _, _, th, v = x
        dt = self.dt
        s, c = np.sin(th), np.cos(th)
        fx = np.array([
            [1.0, 0.0, v * c * dt, s * dt],
            [0.0, 1.0, -v * s * dt, c * dt],
            [0.0, 0.0, 1.0, u[0] * dt],
            [0.0, 0.0, 0.0, 1.0],
        ])
        fu = np.array([[0.0, 0.0], [0.0, 0.0], [v * dt, 0.0], [0.0, dt]])
        return fx, fu


class CartPole(DynamicsModel):
    """Cart pole on ``[x, xdot, theta, thetadot]``, ``theta = 0`` upright.

    Explicit Euler on the continuous equations; ``u`` is the force on the cart.
    """

    name = "cartpole"
    n, m = 4, 1

    def __init__(self, dt: float = 0.02, M: float = 1.0, m_pole: float = 0.2, l: float = 0.5,
                 b: float = 0.1, g: float = 9.81):
        self.dt = dt
        self.M, self.mp, self.l, self.b, self.g = M, m_pole, l, b, g
        self.position_index = np.array([0, 2])

    def accelerations(self, x, u):
        _, xd, th, thd = x
        M, m, l, b, g = self.M, self.mp, self.l, self.b, self.g
        s, c = np.sin(th), np.cos(th)
        F = u[0] - b * xd
        D = M + m * s * s
        xdd = (F + m * s * (l * thd * thd - g * c)) / D
        thdd = (g * (M + m) * s - (F + m * l * thd * thd * s) * c) / (l * D)
        return xdd, thdd

    def step(self, x, u):
        xdd, thdd = self.accelerations(x, u)
        dt = self.dt
        return np.array([x[0] + dt * x[1], x[1] + dt * xdd, x[2] + dt * x[3], x[3] + dt * thdd])

    def jacobians(self, x, u):
        _, xd, th, thd = x
        M, m, l, b, g, dt = self.M, self.mp, self.l, self.b, self.g, self.dt
        s, c = np.sin(th), np.cos(th)
        F = u[0] - b * xd
        D = M + m * s * s
        dD = 2 * m * s * c
        w2 = thd * thd

        Nx = F + m * s * (l * w2 - g * c)
        dNx = np.array([-b, m * c * (l * w2 - g * c) + m * g * s * s, 2 * m * s * l * thd])  # d/d(xd, th, thd)
        Nt = g * (M + m) * s - (F + m * l * w2 * s) * c
        dNt = np.array([b * c, g * (M + m) * c - m * l * w2 * c * c + (F + m * l * w2 * s) * s,
                        -2 * m * l * thd * s * c])

        xdd_x = np.array([0.0, dNx[0] / D, (dNx[1] * D - Nx * dD) / D**2, dNx[2] / D])
        thdd_x = np.array([0.0, dNt[0] / (l * D), (dNt[1] * D - Nt * dD) / (l * D**2), dNt[2] / (l * D)])

        fx = np.eye(4)
        fx[0, 1] += dt
        fx[2, 3] += dt
        fx[1] += dt * xdd_x
        fx[3] += dt * thdd_x
        fu = np.array([[0.0], [dt / D], [0.0], [-dt * c / (l * D)]])
        return fx, fu


class Quadrotor(DynamicsModel):
    """Rigid-body quadrotor with four rotor-thrust inputs.

    State ``[p (3), euler zyx (roll, pitch, yaw), v (3, world), omega (3, body)]``.
    Rotors sit in a plus configuration at arm length ``arm``; ``kappa`` maps
    thrust to yaw reaction torque.
    """

    name = "quadrotor"
    n, m = 12, 4

    def __init__(self, dt: float = 0.01, mass: float = 0.5, g: float = 9.81, arm: float = 0.25,
                 inertia=(4.856e-3, 4.856e-3, 8.801e-3), kappa: float = 0.01):
        self.dt = dt
        self.mass, self.g, self.arm, self.kappa = mass, g, arm, kappa
        self.inertia = np.asarray(inertia, dtype=float)
        self.position_index = np.arange(6)

    @property
    def hover_thrust(self) -> np.ndarray:
        return np.full(4, self.mass * self.g / 4.0)

    @staticmethod
    def rotation(eta):
        phi, th, psi = eta
        cf, sf = np.cos(phi), np.sin(phi)
        ct, st = np.cos(th), np.sin(th)
        cp, sp = np.cos(psi), np.sin(psi)
        return np.array([
            [cp * ct, cp * st * sf - sp * cf, cp * st * cf + sp * sf],
            [sp * ct, sp * st * sf + cp * cf, sp * st * cf - cp * sf],
            [-st, ct * sf, ct * cf],
        ])

    def step(self, x, u):
        p, eta, v, w = x[0:3], x[3:6], x[6:9], x[9:12]
        phi, th, _ = eta
        cf, sf = np.cos(phi), np.sin(phi)
        ct, tt = np.cos(th), np.tan(th)
        # body rates -> euler angle rates
        T = np.array([[1.0, sf * tt, cf * tt], [0.0, cf, -sf], [0.0, sf / ct, cf / ct]])
        thrust = np.sum(u)
        acc = self.rotation(eta) @ np.array([0.0, 0.0, thrust / self.mass]) - np.array([0.0, 0.0, self.g])
        tau = np.array([self.arm * (u[1] - u[3]), self.arm * (u[2] - u[0]),
                        self.kappa * (u[0] - u[1] + u[2] - u[3])])
        I = self.inertia
        wdot = (tau - np.cross(w, I * w)) / I
        dt = self.dt
        return np.concatenate([p + dt * v, eta + dt * (T @ w), v + dt * acc, w + dt * wdot])


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


@dataclass
class QuadraticCost:
    """``l = 1/2 (x-g)'Q(x-g) + 1/2 (u-r)'R(u-r)``, ``phi = 1/2 (x-g)'Qf(x-g)``."""

    Q: np.ndarray
    R: np.ndarray
    Qf: np.ndarray
    goal: np.ndarray
    u_ref: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.Qf = np.atleast_2d(np.asarray(self.Qf, dtype=float))
        self.goal = np.asarray(self.goal, dtype=float)
        self.u_ref = np.zeros(self.R.shape[0]) if self.u_ref is None else np.asarray(self.u_ref, dtype=float)
        for name, W in (("Q", self.Q), ("R", self.R), ("Qf", self.Qf)):
            if not np.allclose(W, W.T):
                raise ValueError(f"{name} must be symmetric")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    def running(self, x, u, k=None) -> float:
        dx = x - self.goal
        du = u - self.u_ref
        return 0.5 * float(dx @ self.Q @ dx + du @ self.R @ du)

    def terminal(self, x) -> float:
        dx = x - self.goal
        return 0.5 * float(dx @ self.Qf @ dx)

    def running_derivs(self, x, u, k=None):
        dx = x - self.goal
        du = u - self.u_ref
        l = 0.5 * float(dx @ self.Q @ dx + du @ self.R @ du)
        return l, self.Q @ dx, self.R @ du, self.Q, np.zeros((self.m, self.n)), self.R

    def terminal_derivs(self, x):
        dx = x - self.goal
        return 0.5 * float(dx @ self.Qf @ dx), self.Qf @ dx, self.Qf


def cost_derivs(cost_model, x, u, k=None):
    """``(l, lx, lu, lxx, lux, luu)`` of the running cost."""
    return cost_model.running_derivs(np.asarray(x, float), np.asarray(u, float), k)


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------


class ConstraintModel:
    """Inequality rows ``g(x, u) <= 0`` grouped as position/velocity/control.

    Subclasses override whichever groups they have. Jacobians of the state
    groups are taken w.r.t. the full state; ``g^p`` Jacobians must vanish on
    the velocity block. Hessians default to zero (Gauss-Newton).
    """

    n_p = 0
    n_v = 0
    n_c = 0

    @property
    def w(self) -> int:
        return self.n_p + self.n_v + self.n_c

    def g_p(self, x):
        return np.zeros(0)

    def g_p_jac(self, x):
        return np.zeros((0, x.size))

    def g_p_hess(self, x):
        return np.zeros((self.n_p, x.size, x.size))

    def g_v(self, x):
        return np.zeros(0)

    def g_v_jac(self, x):
        return np.zeros((0, x.size))

    def g_v_hess(self, x):
        return np.zeros((self.n_v, x.size, x.size))

    def g_c(self, x, u):
        return np.zeros(0)

    def g_c_jac(self, x, u):
        """Returns ``(dg/dx, dg/du)``."""
        return np.zeros((0, x.size)), np.zeros((0, u.size))

    def state_rows(self, x):
        return np.concatenate([self.g_p(x), self.g_v(x)])

    def state_jac(self, x):
        return np.vstack([self.g_p_jac(x), self.g_v_jac(x)])

    def state_hess(self, x):
        return np.concatenate([self.g_p_hess(x), self.g_v_hess(x)], axis=0)


class NoConstraints(ConstraintModel):
    pass


class CircleObstacles(ConstraintModel):
    """``r_i^2 - ||p - c_i||^2 <= 0`` for circular/spherical obstacles.

    ``pos_index`` selects the coordinates of the state compared with the
    centers (2 for the car, 3 for the quadrotor).
    """

    def __init__(self, centers, radii, pos_index=(0, 1)):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.radii = np.broadcast_to(np.asarray(radii, dtype=float), (self.centers.shape[0],)).copy()
        self.pos_index = np.asarray(pos_index, dtype=int)
        self.n_p = self.centers.shape[0]

    def g_p(self, x):
        d = x[self.pos_index] - self.centers
        return self.radii**2 - np.sum(d * d, axis=1)

    def g_p_jac(self, x):
        J = np.zeros((self.n_p, x.size))
        J[:, self.pos_index] = -2.0 * (x[self.pos_index] - self.centers)
        return J

    def g_p_hess(self, x):
        H = np.zeros((self.n_p, x.size, x.size))
        for i in self.pos_index:
            H[:, i, i] = -2.0
        return H


class CartPoleLimits(ConstraintModel):
    """Cart position ``x^2 - x_lim^2 <= 0`` and one-sided ``theta - theta_lim <= 0``."""

    n_p = 2

    def __init__(self, x_lim: float = 1.5, theta_lim: float = np.pi / 6):
        self.x_lim = x_lim
        self.theta_lim = theta_lim

    def g_p(self, x):
        return np.array([x[0] ** 2 - self.x_lim**2, x[2] - self.theta_lim])

    def g_p_jac(self, x):
        J = np.zeros((2, x.size))
        J[0, 0] = 2 * x[0]
        J[1, 2] = 1.0
        return J

    def g_p_hess(self, x):
        H = np.zeros((2, x.size, x.size))
        H[0, 0, 0] = 2.0
        return H


class ControlBox(ConstraintModel):
    """Control limits as ``g^c`` rows ``u - hi <= 0`` and ``lo - u <= 0``.

    Infinite bounds produce no row.
    """

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self._hi_idx = np.flatnonzero(np.isfinite(self.hi))
        self._lo_idx = np.flatnonzero(np.isfinite(self.lo))
        self.n_c = self._hi_idx.size + self._lo_idx.size

    def g_c(self, x, u):
        return np.concatenate([u[self._hi_idx] - self.hi[self._hi_idx], self.lo[self._lo_idx] - u[self._lo_idx]])

    def g_c_jac(self, x, u):
        Ju = np.zeros((self.n_c, u.size))
        nh = self._hi_idx.size
        Ju[np.arange(nh), self._hi_idx] = 1.0
        Ju[nh + np.arange(self._lo_idx.size), self._lo_idx] = -1.0
        return np.zeros((self.n_c, x.size)), Ju


class StateBounds(ConstraintModel):
    """Velocity-group rows ``x_i - hi <= 0`` on selected state components."""

    def __init__(self, index, hi):
        self.index = np.atleast_1d(np.asarray(index, dtype=int))
        self.hi = np.broadcast_to(np.asarray(hi, dtype=float), self.index.shape).copy()
        self.n_v = self.index.size

    def g_v(self, x):
        return x[self.index] - self.hi

    def g_v_jac(self, x):
        J = np.zeros((self.n_v, x.size))
        J[np.arange(self.n_v), self.index] = 1.0
        return J


class StackedConstraints(ConstraintModel):
    """Concatenate several constraint models group by group."""

    def __init__(self, *parts):
        self.parts = [p for p in parts if p is not None]
        self.n_p = sum(p.n_p for p in self.parts)
        self.n_v = sum(p.n_v for p in self.parts)
        self.n_c = sum(p.n_c for p in self.parts)

    def _cat(self, name, *args):
        return np.concatenate([getattr(p, name)(*args) for p in self.parts])

    def g_p(self, x):
        return self._cat("g_p", x)

    def g_p_jac(self, x):
        return np.vstack([p.g_p_jac(x) for p in self.parts])

    def g_p_hess(self, x):
        return np.concatenate([p.g_p_hess(x) for p in self.parts], axis=0)

    def g_v(self, x):
        return self._cat("g_v", x)

    def g_v_jac(self, x):
        return np.vstack([p.g_v_jac(x) for p in self.parts])

    def g_v_hess(self, x):
        return np.concatenate([p.g_v_hess(x) for p in self.parts], axis=0)

    def g_c(self, x, u):
        return self._cat("g_c", x, u)

    def g_c_jac(self, x, u):
        jx, ju = zip(*(p.g_c_jac(x, u) for p in self.parts))
        return np.vstack(jx), np.vstack(ju)


@dataclass
class Partition:
    """Row counts of the position, velocity and control groups (in that order)."""

    n_p: int
    n_v: int
    n_c: int

    @property
    def p(self) -> slice:
        return slice(0, self.n_p)

    @property
    def v(self) -> slice:
        return slice(self.n_p, self.n_p + self.n_v)

    @property
    def c(self) -> slice:
        return slice(self.n_p + self.n_v, self.n_p + self.n_v + self.n_c)


def eval_constraints(cmodel, x, u):
    """All rows at ``(x, u)`` ordered ``[g^p; g^v; g^c]`` plus the partition."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    g = np.concatenate([cmodel.g_p(x), cmodel.g_v(x), cmodel.g_c(x, u)])
    return g, Partition(cmodel.n_p, cmodel.n_v, cmodel.n_c)


@dataclass
class ConstraintLinearization:
    """Propagated residual ``g`` with control Jacobian ``C`` and state Jacobian ``D``."""

    g: np.ndarray
    C: np.ndarray
    D: np.ndarray
    partition: Partition = field(default_factory=lambda: Partition(0, 0, 0))

    @property
    def w(self) -> int:
        return self.g.size

    def copy(self) -> "ConstraintLinearization":
        return ConstraintLinearization(self.g.copy(), self.C.copy(), self.D.copy(), self.partition)


def propagate_constraints(cmodel, model, x, u, fx=None, fu=None, fx_next=None, *,
                          include_position: bool = True) -> ConstraintLinearization:
    """Make every row an explicit function of the control at this step.

    Position rows are evaluated two steps ahead, velocity rows one step
    ahead, control rows in place. ``include_position=False`` drops the
    position rows (last step of the horizon, where no state two steps ahead
    exists). Jacobians not supplied are computed from ``model``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = x.size, u.size
    if fx is None or fu is None:
        fx, fu = model.jacobians(x, u)
    x1 = model.step(x, u)
    gs, Cs, Ds = [], [], []
    n_p = cmodel.n_p if include_position else 0
    if n_p:
        u0 = np.zeros(m)
        if fx_next is None:
            fx_next, _ = model.jacobians(x1, u0)
        x2 = model.step(x1, u0)  # position block of x2 does not depend on u0
        Gp = cmodel.g_p_jac(x2)
        GpF = Gp @ fx_next
        gs.append(cmodel.g_p(x2))
        Cs.append(GpF @ fu)
        Ds.append(GpF @ fx)
    if cmodel.n_v:
        Gv = cmodel.g_v_jac(x1)
        gs.append(cmodel.g_v(x1))
        Cs.append(Gv @ fu)
        Ds.append(Gv @ fx)
    if cmodel.n_c:
        Jx, Ju = cmodel.g_c_jac(x, u)
        gs.append(cmodel.g_c(x, u))
        Cs.append(Ju)
        Ds.append(Jx)
    if not gs:
        return ConstraintLinearization(np.zeros(0), np.zeros((0, m)), np.zeros((0, n)), Partition(0, 0, 0))
    return ConstraintLinearization(np.concatenate(gs), np.vstack(Cs), np.vstack(Ds),
                                   Partition(n_p, cmodel.n_v, cmodel.n_c))


# ---------------------------------------------------------------------------
# Trajectory-level feasibility metrics
# ---------------------------------------------------------------------------


def constraint_values(cmodel, traj) -> np.ndarray:
    """Rows at every knot: ``(N + 1, w)``; control rows at the last knot are ``-inf``."""
    X, U = traj.states, traj.controls
    N = U.shape[0]
    out = np.full((N + 1, cmodel.w), -np.inf)
    ns = cmodel.n_p + cmodel.n_v
    for k in range(N + 1):
        if ns:
            out[k, :ns] = cmodel.state_rows(X[k])
        if cmodel.n_c and k < N:
            out[k, ns:] = cmodel.g_c(X[k], U[k])
    return out


def max_violation(cmodel, traj) -> float:
    """Largest positive part of any inequality row over the trajectory."""
    if cmodel is None or cmodel.w == 0:
        return 0.0
    vals = constraint_values(cmodel, traj)
    return float(max(0.0, np.max(vals)))
