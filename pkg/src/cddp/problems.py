"""Benchmark problem factories: 2D car, cart pole and quadrotor."""

from __future__ import annotations

import numpy as np

from .core import Problem
from .models import (
    Car2D,
    CartPole,
    CartPoleLimits,
    CircleObstacles,
    Quadrotor,
    QuadraticCost,
)

CAR_GOAL = np.array([3.0, 3.0, np.pi / 2, 0.0])
CAR_OBSTACLES = np.array([[1.0, 1.0], [1.0, 2.5], [2.5, 2.5]])
CAR_RADIUS = 0.5
CAR_STARTS = np.array([
    [0.0, 0.0, 0.0, 0.0],
    [0.5, 0.0, 0.0, 0.0],
    [0.0, 0.5, 0.0, 0.0],
    [-0.5, 0.0, 0.0, 0.0],
    [0.0, -0.5, 0.0, 0.0],
    [0.5, -0.5, 0.0, 0.0],
])
CAR_U_LO = np.array([-np.pi / 3, -6.0])
CAR_U_HI = np.array([np.pi / 3, 6.0])

CARTPOLE_X0 = np.array([0.0, 0.0, 0.0, 0.0])
CARTPOLE_GOAL = np.array([1.0, 0.0, 0.0, 0.0])

QUAD_GOAL_POSITION = np.array([1.0, 5.0, 5.0])
QUAD_OBSTACLES = np.array([[0.5, 2.0, 2.0], [1.2, 3.2, 3.4], [0.2, 3.8, 4.2]])
QUAD_RADII = np.array([0.6, 0.5, 0.4])
QUAD_STARTS = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]])


def terminal_weights(n_position: int, n_velocity: int, position: float = 100.0, velocity: float = 10.0):
    return np.diag([position] * n_position + [velocity] * n_velocity)


def car_problem(x0=None, *, horizon: int = 100, dt: float = 0.02, radius: float | np.ndarray = CAR_RADIUS,
                control_weight: float = 1e-2, control_limits: bool = False, initial_controls=None) -> Problem:
    """Reach ``[3, 3, pi/2, 0]`` around three circular obstacles."""
    model = Car2D(dt)
    cost = QuadraticCost(Q=np.zeros((4, 4)), R=control_weight * np.eye(2),
                         Qf=terminal_weights(3, 1), goal=CAR_GOAL)
    cons = CircleObstacles(CAR_OBSTACLES, radius)
    lo, hi = (CAR_U_LO, CAR_U_HI) if control_limits else (None, None)
    return Problem(model, cost, CAR_STARTS[0] if x0 is None else x0, horizon, cons,
                   initial_controls=initial_controls, u_lo=lo, u_hi=hi)


def cartpole_problem(x0=None, *, horizon: int = 100, dt: float = 0.02, x_lim: float = 1.5,
                     theta_lim: float = np.pi / 6, goal=None, control_weight: float = 1e-2,
                     constrained: bool = True, initial_controls=None) -> Problem:
    """Carry the upright pole to ``goal`` (default: cart at 1 m) under position/angle limits."""
    model = CartPole(dt)
    goal = CARTPOLE_GOAL if goal is None else np.asarray(goal, float)
    cost = QuadraticCost(Q=np.zeros((4, 4)), R=control_weight * np.eye(1),
                         Qf=np.diag([100.0, 10.0, 100.0, 10.0]), goal=goal)
    cons = CartPoleLimits(x_lim, theta_lim) if constrained else None
    return Problem(model, cost, CARTPOLE_X0 if x0 is None else x0, horizon, cons,
                   initial_controls=initial_controls)


def quadrotor_problem(start=None, *, horizon: int = 300, dt: float = 0.01, control_weight: float = 1e-2,
                      initial_controls=None) -> Problem:
    """Fly from a hover point to ``[1, 5, 5]`` past three spheres; controls start at hover thrust."""
    model = Quadrotor(dt)
    x0 = np.zeros(12)
    x0[:3] = QUAD_STARTS[0] if start is None else start
    goal = np.zeros(12)
    goal[:3] = QUAD_GOAL_POSITION
    cost = QuadraticCost(Q=np.zeros((12, 12)), R=control_weight * np.eye(4),
                         Qf=terminal_weights(6, 6), goal=goal, u_ref=model.hover_thrust)
    cons = CircleObstacles(QUAD_OBSTACLES, QUAD_RADII, pos_index=(0, 1, 2))
    if initial_controls is None:
        initial_controls = np.tile(model.hover_thrust, (horizon, 1))
    return Problem(model, cost, x0, horizon, cons, initial_controls=initial_controls)


PROBLEMS = {"car": car_problem, "cartpole": cartpole_problem, "quadrotor": quadrotor_problem}
