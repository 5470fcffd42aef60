"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Each check returns ``(ok, detail)``; runtime limits are part of the verdict.
"""

import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import composed_fd, dense_kkt, random_instance, random_lq, rel_err, riccati  # noqa: E402
from cddp.al import penalty_eval, penalty_kernel  # noqa: E402
from cddp.core import Options, RegState, ddp_backward_pass, dynamics_defect, solve_unconstrained  # noqa: E402
from cddp.estimators import make_solver  # noqa: E402
from cddp.models import (  # noqa: E402
    Car2D,
    CartPole,
    CartPoleLimits,
    CircleObstacles,
    ControlBox,
    StackedConstraints,
    StateBounds,
    max_violation,
    propagate_constraints,
)
from cddp.problems import CAR_GOAL, CAR_OBSTACLES, CAR_STARTS, CAR_U_HI, CAR_U_LO, car_problem, cartpole_problem  # noqa: E402
from cddp.skkt import solve_kkt_nominal  # noqa: E402

NO_REG = RegState(nu1=0.0, nu2=0.0, nu_min=0.0)
CAR_HORIZON = 200
WARM_RADII = (0.4, 0.3, 0.2)
CARTPOLE_TASK = dict(goal=[1.6, 0.0, 0.0, 0.0], theta_lim=0.1)


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# --- shared solver runs -------------------------------------------------------------------


@lru_cache(maxsize=None)
def car_runs(solver: str):
    """Every car start at the benchmark horizon; returns (estimators, seconds)."""
    def run():
        return [make_solver(solver).fit(car_problem(x0, horizon=CAR_HORIZON)) for x0 in CAR_STARTS]
    return timed(run)


@lru_cache(maxsize=None)
def warm_runs():
    def run():
        out = []
        for radius in WARM_RADII:
            warm = make_solver("skkt").fit(car_problem(CAR_STARTS[0], horizon=CAR_HORIZON, radius=radius))
            true = car_problem(CAR_STARTS[0], horizon=CAR_HORIZON)
            start_violation = max_violation(true.constraints, warm.trajectory_)
            out.append((start_violation, make_solver("skkt").fit(true, warm.trajectory_)))
        return out
    return timed(run)


@lru_cache(maxsize=None)
def hybrid_runs():
    def run():
        return [make_solver("hybrid").fit(car_problem(x0, horizon=100, control_limits=True)) for x0 in CAR_STARTS]
    return timed(run)


@lru_cache(maxsize=None)
def cartpole_runs():
    def run():
        return {h: make_solver("skkt").fit(cartpole_problem(horizon=h, **CARTPOLE_TASK)) for h in (100, 200)}
    return timed(run)


# --- criteria -------------------------------------------------------------------------------


def criterion_1():
    rng = np.random.default_rng(1)
    p = random_lq(rng, n=4, m=2, N=50)
    (traj, rep), secs = timed(lambda: solve_unconstrained(p, Options(reg=NO_REG)))
    Ks, Ps = riccati(p.dynamics.A, p.dynamics.B, p.cost.Q, p.cost.R, p.cost.Qf, p.horizon)
    K = ddp_backward_pass(traj, p.dynamics, p.cost, NO_REG).gains.K
    gain_err = float(np.max(np.abs(K - Ks)))
    cost_err = abs(rep.cost - 0.5 * p.x0 @ Ps[0] @ p.x0)
    ok = gain_err <= 1e-8 and cost_err <= 1e-6 and rep.iterations <= 3 and secs < 1.0
    return ok, f"gain err {gain_err:.1e}, cost err {cost_err:.1e}, {rep.iterations} iterations, {secs:.2f} s"


def criterion_2():
    rng = np.random.default_rng(2)

    def run():
        worst = 0.0
        for _ in range(1000):
            m, w = int(rng.integers(1, 5)), int(rng.integers(1, 7))
            q, lin, state = random_instance(rng, m, w)
            mu_sigma = float(rng.uniform(0, 0.5))
            step = solve_kkt_nominal(q, lin, state, mu_sigma)
            ref = np.concatenate(dense_kkt(q, lin, state.s, state.lam, mu_sigma))
            got = np.concatenate([step.du, step.ds, step.dlam])
            scaled = np.concatenate([state.s * step.dp, state.lam * step.dq])
            worst = max(worst, float(np.max(np.abs(got - ref)) / (1.0 + np.max(np.abs(ref)))),
                        float(np.max(np.abs(scaled - got[m:]))))
        return worst
    worst, secs = timed(run)
    return worst <= 1e-9 and secs < 5.0, f"worst scaled residual {worst:.1e}, {secs:.2f} s"


def criterion_3():
    ests, secs = car_runs("skkt")
    iters = [e.report_.iterations for e in ests]
    conv = all(e.report_.exit_reason == "converged" for e in ests)
    viol = max(e.report_.max_violation for e in ests)
    goal_err = max(float(np.max(np.abs(e.trajectory_.states[-1, :3] - CAR_GOAL[:3]))) for e in ests)
    ok = conv and max(iters) <= 15 and viol <= 1e-7 and goal_err <= 0.05 and secs < 60
    return ok, f"iterations {iters}, max violation {viol:.1e}, goal error {goal_err:.3f}, {secs:.1f} s"


def criterion_4():
    runs, secs = warm_runs()
    starts = [v for v, _ in runs]
    finals = [e.report_.max_violation for _, e in runs]
    ok = all(v <= 1e-7 for v in finals) and secs < 60
    return ok, (f"start violations {', '.join(f'{v:.2f}' for v in starts)} -> "
                f"{', '.join(f'{v:.1e}' for v in finals)}, {secs:.1f} s")


def criterion_5():
    skkt, s1 = car_runs("skkt")
    active, s2 = car_runs("active_set")
    a = float(np.mean([e.report_.cost for e in skkt]))
    b = float(np.mean([e.report_.cost for e in active]))
    feasible = max(e.report_.max_violation for e in active)
    return a <= b and s1 + s2 < 120, f"S-KKT {a:.4f} <= active set {b:.4f} (its violation {feasible:.1e}), {s1 + s2:.1f} s"


def criterion_6():
    ests, secs = car_runs("al")
    viol = max(e.report_.max_violation for e in ests)
    iters = max(e.report_.iterations for e in ests)
    return viol <= 1e-3 and iters <= 15 and secs < 60, f"max violation {viol:.1e}, max iterations {iters}, {secs:.1f} s"


def criterion_7():
    ests, secs = hybrid_runs()
    inside = all(np.all(e.trajectory_.controls >= CAR_U_LO) and np.all(e.trajectory_.controls <= CAR_U_HI)
                 for e in ests)
    obstacles = CircleObstacles(CAR_OBSTACLES, 0.5)
    viol = max(max_violation(obstacles, e.trajectory_) for e in ests)
    return inside and viol <= 1e-7 and secs < 120, f"controls in box: {inside}, state violation {viol:.1e}, {secs:.1f} s"


def criterion_8():
    rng = np.random.default_rng(8)

    def run():
        a, b = penalty_kernel(-0.5 - 1e-14), penalty_kernel(-0.5)
        jump = float(np.max(np.abs(np.subtract(a, b))))
        lams, mus = np.logspace(-4, 4, 9), np.logspace(-4, 8, 13)
        gs = np.concatenate([-np.logspace(-6, 3, 10), [0.0], np.logspace(-6, 3, 10)])
        L, M, G = np.meshgrid(lams, mus, gs, indexing="ij")
        prop_i = bool(np.all(penalty_eval(L, M, G).d1 >= 0))
        big = np.logspace(-4, 0, 5)[:, None]
        prop_ii = bool(np.all(penalty_eval(big, 1e8, np.array([1e-2, 1.0, 10.0])).d1 > 1e6))
        prop_iii = bool(np.all(penalty_eval(big, 1e8, -np.array([1e-2, 1.0, 10.0])).d1 < 1e-6))
        n = 10_000
        lam, mu = np.exp(rng.uniform(-3, 3, n)), np.exp(rng.uniform(-3, 3, n))
        t = np.concatenate([rng.uniform(-5, 3, n // 2), -0.5 + rng.uniform(-1e-2, 1e-2, n // 2)])
        g = t * lam / mu
        h = np.minimum(1e-6 * np.maximum(1.0, np.abs(g)), 0.5 * np.abs(g + 0.5 * lam / mu))
        pe = penalty_eval(lam, mu, g)
        fd1 = (penalty_eval(lam, mu, g + h).value - penalty_eval(lam, mu, g - h).value) / (2 * h)
        fd2 = (penalty_eval(lam, mu, g + h).d1 - penalty_eval(lam, mu, g - h).d1) / (2 * h)
        fd_err = max(float(np.max(np.abs(pe.d1 - fd1) / np.maximum(1, np.abs(fd1)))),
                     float(np.max(np.abs(pe.d2 - fd2) / np.maximum(1, np.abs(fd2)))))
        return jump, prop_i, prop_ii, prop_iii, fd_err
    (jump, p1, p2, p3, fd_err), secs = timed(run)
    ok = jump <= 1e-12 and p1 and p2 and p3 and fd_err <= 1e-6 and secs < 5
    return ok, f"branch jump {jump:.1e}, properties {p1}/{p2}/{p3}, FD err {fd_err:.1e}, {secs:.2f} s"


def criterion_9():
    rng = np.random.default_rng(9)
    cases = [
        (Car2D(), StackedConstraints(CircleObstacles(CAR_OBSTACLES, 0.5), StateBounds([3], 2.0),
                                     ControlBox(CAR_U_LO, CAR_U_HI))),
        (CartPole(), StackedConstraints(CartPoleLimits(), StateBounds([1], 3.0))),
    ]

    def run():
        worst = 0.0
        for model, cmodel in cases:
            for _ in range(500):
                x, u = rng.uniform(-2, 2, model.n), rng.uniform(-2, 2, model.m)
                lin = propagate_constraints(cmodel, model, x, u)
                _, C, D = composed_fd(cmodel, model, x, u)
                worst = max(worst, rel_err(lin.C, C), rel_err(lin.D, D))
        return worst
    worst, secs = timed(run)
    return worst <= 1e-5 and secs < 10, f"worst relative error {worst:.1e}, {secs:.2f} s"


def criterion_10():
    ests = car_runs("skkt")[0] + [e for _, e in warm_runs()[0]]
    records = [r for e in ests for r in e.diagnostics_ if "loops" in r]
    loops = sum(r["loops"] for r in records)
    caps = sum(r["caps"] for r in records)
    min_s = min(r["min_s"] for r in records)
    min_lam = min(r["min_lam"] for r in records)
    exit_ratio = max(r["max_exit_ratio"] for r in records)
    ok = min_s > 0 and min_lam > 0 and exit_ratio <= 0.01 and caps <= 0.05 * loops
    return ok, (f"min s {min_s:.1e}, min lambda {min_lam:.1e}, max exit ratio {exit_ratio:.1e}, "
                f"caps {caps}/{loops}")


def criterion_11():
    ests = []
    for name in ("skkt", "active_set", "al"):
        ests += car_runs(name)[0]
    ests += hybrid_runs()[0] + [e for _, e in warm_runs()[0]] + list(cartpole_runs()[0].values())
    ests.append(make_solver("ddp").fit(cartpole_problem(horizon=100, constrained=False, goal=CARTPOLE_TASK["goal"])))
    worst = max(dynamics_defect(e.problem_.dynamics, e.trajectory_) for e in ests)
    return worst <= 1e-12, f"worst defect {worst:.1e} over {len(ests)} runs"


def criterion_12():
    runs, secs = cartpole_runs()
    lim = CartPoleLimits(theta_lim=CARTPOLE_TASK["theta_lim"])
    parts = []
    ok = True
    for h, est in runs.items():
        X = est.trajectory_.states
        over_x = float(np.max(np.abs(X[:, 0])) - lim.x_lim)
        over_theta = float(np.max(X[:, 2]) - lim.theta_lim)
        ok &= over_x <= 1e-7 and over_theta <= 1e-7
        parts.append(f"H={h}: x margin {-over_x:.3f}, theta margin {-over_theta:.1e}")
    return ok, f"{'; '.join(parts)}, {secs:.1f} s"


CRITERIA = {
    1: ("LQR oracle", criterion_1),
    2: ("KKT step vs dense solve", criterion_2),
    3: ("car, six starts", criterion_3),
    4: ("infeasible warm starts", criterion_4),
    5: ("S-KKT vs active-set cost", criterion_5),
    6: ("AL violation", criterion_6),
    7: ("hybrid with control box", criterion_7),
    8: ("penalty smoothness", criterion_8),
    9: ("constraint propagation", criterion_9),
    10: ("interior-point mechanics", criterion_10),
    11: ("dynamics defect", criterion_11),
    12: ("cart pole limits", criterion_12),
}
SLOW = {3, 4, 5, 6, 7, 10, 11, 12}


def check(number):
    name, fn = CRITERIA[number]
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} {number:2d} {name}: {detail}"
    return ok, line


@pytest.mark.parametrize("number", [pytest.param(n, marks=pytest.mark.slow) if n in SLOW else n for n in CRITERIA])
def test_criterion(number, capsys):
    ok, line = check(number)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


if __name__ == "__main__":
    results = [check(n) for n in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
