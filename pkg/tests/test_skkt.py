import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import dense_kkt, random_instance, random_lq
from cddp.core import (
    Options,
    Problem,
    QExpansion,
    RegState,
    ddp_backward_pass,
    ddp_forward_pass,
    rollout,
    solve_unconstrained,
    unconstrained_gains,
)
from cddp.models import ConstraintLinearization, ConstraintModel, QuadraticCost, double_integrator, max_violation
from cddp.problems import car_problem, cartpole_problem
from cddp.skkt import (
    SkktOptions,
    SlackDualState,
    accept_candidate,
    active_set_backward,
    active_set_gains,
    centering,
    constrained_gains,
    duality_measure,
    fraction_to_boundary,
    independent_rows,
    init_slack_dual,
    skkt_backward_pass,
    skkt_forward_pass,
    skkt_inner_loop,
    solve_active_set,
    solve_kkt_nominal,
    solve_skkt,
    update_nominal,
)

NO_REG = RegState(nu1=0.0, nu2=0.0, nu_min=0.0)


# --- slack/dual primitives ------------------------------------------------------


def test_init_slack_dual_examples():
    st0 = init_slack_dual([-0.5])
    assert st0.s[0] == 0.5 and st0.lam[0] == 1.0
    assert init_slack_dual([0.2]).s[0] == 1e-4
    assert init_slack_dual([-1e-6], 1e-4).s[0] == 1e-4
    with pytest.raises(ValueError):
        init_slack_dual([0.0], eps=0.0)


def test_duality_measure_examples(rng):
    assert duality_measure(SlackDualState(np.ones(5), np.ones(5))) == 1.0
    assert duality_measure(SlackDualState(np.array([2.0, 0.0]), np.array([1.0, 5.0]))) == 1.0
    s, lam = rng.uniform(0, 3, 7), rng.uniform(0, 3, 7)
    assert duality_measure(SlackDualState(s, lam)) == pytest.approx(sum(a * b for a, b in zip(s, lam)) / 7)
    with pytest.raises(ValueError):
        duality_measure(SlackDualState(np.zeros(0), np.zeros(0)))


def test_centering_examples():
    uniform = SlackDualState(np.full(3, 2.0), np.full(3, 0.5))
    assert centering(uniform, duality_measure(uniform)) == 0.0
    skewed = SlackDualState(np.array([1e-4, 1.0]), np.array([1.0, 1.0]))
    assert centering(skewed, duality_measure(skewed)) == pytest.approx(0.8)
    # xi = 0.5: products 1 and 3, mu = 2
    half = SlackDualState(np.array([1.0, 3.0]), np.array([1.0, 1.0]))
    assert centering(half, 2.0) == pytest.approx(0.1 * 0.05**3)


@given(st.lists(st.floats(1e-6, 1e3), min_size=1, max_size=8), st.integers(0, 2**31 - 1))
def test_centering_range(svals, seed):
    lam = np.random.default_rng(seed).uniform(1e-6, 1e3, len(svals))
    state = SlackDualState(np.array(svals), lam)
    assert 0.0 <= centering(state, duality_measure(state)) <= 0.8


def test_fraction_to_boundary_examples():
    state = SlackDualState(np.array([1.0]), np.array([1.0]))
    assert fraction_to_boundary(state, [0.5], [0.0]) == 1.0
    assert fraction_to_boundary(state, [-2.0], [1.0], zeta=0.9) == pytest.approx(0.45)
    with pytest.raises(ValueError):
        fraction_to_boundary(state, [0.0], [0.0], zeta=1.0)


@settings(max_examples=200)
@given(st.integers(1, 6), st.floats(0.9, 0.999), st.integers(0, 2**31 - 1))
def test_fraction_to_boundary_keeps_positive(w, zeta, seed):
    rng = np.random.default_rng(seed)
    state = SlackDualState(rng.uniform(1e-6, 5, w), rng.uniform(1e-6, 5, w))
    ds, dl = rng.normal(0, 10, w), rng.normal(0, 10, w)
    a = fraction_to_boundary(state, ds, dl, zeta)
    assert 0 < a <= 1
    assert np.all(state.s + a * ds > 0) and np.all(state.lam + a * dl > 0)


def test_update_nominal_scalar():
    lin = ConstraintLinearization(np.array([-1.0]), np.array([[2.0]]), np.zeros((1, 1)))
    q = QExpansion(np.zeros(1), np.array([0.3]), np.eye(1), np.zeros((1, 1)), np.array([[4.0]]))
    lin2, q2 = update_nominal(lin, q, 0.5, np.array([1.0]))
    assert lin2.g[0] == pytest.approx(0.0)
    assert q2.Qu[0] == pytest.approx(0.3 + 4.0 * 0.5)
    np.testing.assert_array_equal(lin2.C, lin.C)
    np.testing.assert_array_equal(q2.Quu, q.Quu)


def test_update_nominal_gradient_of_shifted_model(rng):
    q, lin, _ = random_instance(rng, 3, 2)
    du = rng.standard_normal(3)
    _, q2 = update_nominal(lin, q, 0.7, du)

    def model(v):
        return q.Qu @ v + 0.5 * v @ q.Quu @ v

    h = 1e-6
    z = 0.7 * du
    grad = [(model(z + h * e) - model(z - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(q2.Qu, grad, atol=1e-7)


# --- KKT step -------------------------------------------------------------------


def test_kkt_step_without_constraints(rng):
    q, _, _ = random_instance(rng, 3, 0)
    lin = ConstraintLinearization(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
    step = solve_kkt_nominal(q, lin, SlackDualState(np.zeros(0), np.zeros(0)), 0.0)
    np.testing.assert_allclose(step.du, -np.linalg.solve(q.Quu, q.Qu))


def test_kkt_step_scalar_example():
    q = QExpansion(np.zeros(1), np.array([1.0]), np.eye(1), np.zeros((1, 1)), np.eye(1))
    lin = ConstraintLinearization(np.array([-1.0]), np.eye(1), np.zeros((1, 1)))
    state = SlackDualState(np.array([1.0]), np.array([1.0]))
    step = solve_kkt_nominal(q, lin, state, 0.0)
    assert step.dq[0] == pytest.approx(-1.5)
    assert step.dp[0] == pytest.approx(0.5)
    assert step.du[0] == pytest.approx(-0.5)
    du, ds, dl = dense_kkt(q, lin, state.s, state.lam, 0.0)
    np.testing.assert_allclose([step.du[0], step.ds[0], step.dlam[0]], [du[0], ds[0], dl[0]], atol=1e-14)


def test_kkt_step_recovers_scaled_variables(rng):
    q, lin, state = random_instance(rng, 3, 4)
    step = solve_kkt_nominal(q, lin, state, 0.01)
    np.testing.assert_allclose(step.ds, state.s * step.dp, rtol=1e-15)
    np.testing.assert_allclose(step.dlam, state.lam * step.dq, rtol=1e-15)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.floats(0.0, 0.5), st.integers(0, 2**31 - 1))
def test_kkt_step_matches_dense_solve(m, w, mu_sigma, seed):
    rng = np.random.default_rng(seed)
    q, lin, state = random_instance(rng, m, w)
    step = solve_kkt_nominal(q, lin, state, mu_sigma)
    du, ds, dl = dense_kkt(q, lin, state.s, state.lam, mu_sigma)
    scale = 1.0 + max(np.abs(du).max(), np.abs(ds).max(), np.abs(dl).max())
    assert np.abs(step.du - du).max() <= 1e-9 * scale
    assert np.abs(step.ds - ds).max() <= 1e-9 * scale
    assert np.abs(step.dlam - dl).max() <= 1e-9 * scale


# --- inner loop and gains -----------------------------------------------------


def test_inner_loop_skipped_without_constraints(rng):
    q, _, _ = random_instance(rng, 2, 0)
    res = skkt_inner_loop(q, ConstraintLinearization(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 3))))
    assert res.iterations == 0 and not res.du.any()


def test_inner_loop_far_constraints_give_newton_step(rng):
    q, lin, _ = random_instance(rng, 2, 3)
    lin = ConstraintLinearization(np.full(3, -100.0), lin.C, lin.D)
    res = skkt_inner_loop(q, lin)
    cg = constrained_gains(res.q, res.lin, res.state)
    k0, _ = unconstrained_gains(q)
    assert res.iterations <= 3
    # the accumulated step plus the residual feedforward is the full control update
    np.testing.assert_allclose(res.du + cg.k, k0, atol=1e-6)


def test_inner_loop_scalar_active_exit():
    q = QExpansion(np.zeros(1), np.array([-3.0]), np.eye(1), np.zeros((1, 1)), np.eye(1))
    lin = ConstraintLinearization(np.array([0.0]), np.eye(1), np.zeros((1, 1)))
    res = skkt_inner_loop(q, lin)
    assert not res.capped
    assert float(res.state.s @ res.state.lam) <= 0.01 * res.mu0
    assert res.min_s > 0 and res.min_lam > 0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_inner_loop_positivity_and_exit(m, w, seed):
    rng = np.random.default_rng(seed)
    q, lin, _ = random_instance(rng, m, w)
    res = skkt_inner_loop(q, lin)
    assert res.min_s > 0 and res.min_lam > 0
    assert np.all(res.state.s > 0) and np.all(res.state.lam > 0)
    assert res.capped or res.ratio <= 0.01


def test_gains_without_constraints_are_unconstrained(rng):
    q, _, _ = random_instance(rng, 3, 0)
    lin = ConstraintLinearization(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)))
    cg = constrained_gains(q, lin, SlackDualState(np.zeros(0), np.zeros(0)))
    k, K = unconstrained_gains(q)
    np.testing.assert_allclose(cg.k, k, atol=1e-14)
    np.testing.assert_allclose(cg.K, K, atol=1e-14)
    np.testing.assert_array_equal(cg.H, np.eye(3))


@pytest.mark.parametrize("boundary", [False, True])
def test_gains_match_dense_perturbed_solve(boundary, rng):
    for _ in range(50):
        q, lin, state = random_instance(rng, 3, 4)
        if boundary:
            state = SlackDualState(np.maximum(-lin.g, 1e-3), state.lam)
            lin = ConstraintLinearization(-state.s, lin.C, lin.D)
        cg = constrained_gains(q, lin, state)
        du0, _, _ = dense_kkt(q, lin, state.s, state.lam, 0.0)
        np.testing.assert_allclose(cg.k, du0, atol=1e-8)
        for dx in np.eye(3):
            du, _, _ = dense_kkt(q, lin, state.s, state.lam, 0.0, dx)
            np.testing.assert_allclose(cg.k + cg.K @ dx, du, atol=1e-8)


def test_gains_cached_blocks(rng):
    q, lin, state = random_instance(rng, 2, 3)
    cg = constrained_gains(q, lin, state)
    E = state.lam[:, None] * lin.C
    np.testing.assert_allclose(cg.E, E)
    np.testing.assert_allclose(cg.F, state.lam * state.s)
    Minv = E @ np.linalg.solve(q.Quu, E.T) + np.diag(cg.F)
    np.testing.assert_allclose(cg.M @ Minv, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(cg.H, np.eye(2) - E.T @ cg.M @ E @ np.linalg.inv(q.Quu), atol=1e-10)


# --- passes ------------------------------------------------------------------


def test_backward_pass_without_constraints_matches_ddp(rng):
    p = random_lq(rng, N=30)
    traj = rollout(p.dynamics, p.x0, rng.standard_normal((30, 2)))
    sk = skkt_backward_pass(traj, p, RegState())
    dd = ddp_backward_pass(traj, p.dynamics, p.cost, RegState())
    np.testing.assert_allclose(sk.gains.k, dd.gains.k, atol=1e-10)
    np.testing.assert_allclose(sk.gains.K, dd.gains.K, atol=1e-10)


def test_backward_pass_car_inner_loops_reach_threshold():
    p = car_problem()
    traj = rollout(p.dynamics, p.x0, p.initial_controls)
    bw = skkt_backward_pass(traj, p, RegState())
    assert bw.stats["loops"] > 0 and bw.stats["caps"] == 0
    assert bw.stats["max_exit_ratio"] <= 0.01
    assert bw.stats["min_s"] > 0 and bw.stats["min_lam"] > 0


def test_backward_pass_cartpole_value_hessians():
    p = cartpole_problem(goal=[1.6, 0.0, 0.0, 0.0], theta_lim=0.1)
    traj = rollout(p.dynamics, p.x0, p.initial_controls)
    bw = skkt_backward_pass(traj, p, RegState())
    for v in bw.values:
        assert np.array_equal(v.Vxx, v.Vxx.T)
        assert np.linalg.eigvalsh(v.Vxx).min() > -1e-9


def test_forward_pass_without_constraints_matches_ddp(rng):
    p = random_lq(rng, N=20)
    traj = rollout(p.dynamics, p.x0, rng.standard_normal((20, 2)))
    bw = skkt_backward_pass(traj, p, RegState())
    new, info = skkt_forward_pass(traj, p, bw.q)
    ref, _ = ddp_forward_pass(traj, bw.gains, 1.0, p.dynamics, p.cost)
    np.testing.assert_allclose(new.states, ref.states, atol=1e-10)
    assert info.restarts == 0 and info.terminal_shrinks == 0


class SpeedLimit(ConstraintModel):
    """Velocity row ``v^2 - 1 <= 0``; its linearization at rest is blind to the control."""

    n_v = 1

    def g_v(self, x):
        return np.array([x[1] ** 2 - 1.0])

    def g_v_jac(self, x):
        return np.array([[0.0, 2 * x[1]]])


def test_terminal_trust_region_halves_until_feasible():
    dyn = double_integrator(0.1)
    cost = QuadraticCost(np.zeros((2, 2)), 1e-4 * np.eye(1), np.diag([0.0, 100.0]), np.array([0.0, 5.0]))
    p = Problem(dyn, cost, np.zeros(2), 1, SpeedLimit())
    traj = rollout(dyn, p.x0, p.initial_controls)
    bw = skkt_backward_pass(traj, p, RegState())
    # unconstrained du is about 50; delta 100 -> 50 -> 25 -> 12.5 -> 6.25 (|v| <= 1 first at 6.25)
    new, info = skkt_forward_pass(traj, p, bw.q, SkktOptions(delta0=100.0, eta=0.5))
    assert info.terminal_shrinks == 4
    assert new.controls[0, 0] == pytest.approx(6.25)
    assert max_violation(SpeedLimit(), new) == 0.0


def test_acceptance_rule():
    assert accept_candidate(2.0, 0.0, 1.0, 0.0, 1e-7)
    assert not accept_candidate(1.0, 0.0, 2.0, 0.0, 1e-7)
    assert not accept_candidate(2.0, 0.0, 1.0, 1e-3, 1e-7)
    # infeasible nominal: any violation reduction is progress
    assert accept_candidate(1.0, 0.3, 5.0, 0.1, 1e-7)
    assert not accept_candidate(1.0, 0.3, np.inf, 0.0, 1e-7)


def test_solve_unconstrained_problem_matches_ddp(rng):
    p = random_lq(rng)
    _, rs = solve_skkt(p, SkktOptions(reg=NO_REG))
    _, rd = solve_unconstrained(p, Options(reg=NO_REG))
    assert rs.converged
    assert rs.cost == pytest.approx(rd.cost, abs=1e-6)


@pytest.mark.slow
def test_solve_car_feasible():
    traj, rep = solve_skkt(car_problem())
    assert rep.converged and rep.iterations <= 15
    assert max_violation(car_problem().constraints, traj) <= 1e-7


# --- active-set baseline -----------------------------------------------------------


def test_active_set_gains_without_active_rows(rng):
    q, lin, _ = random_instance(rng, 2, 3)
    lin = ConstraintLinearization(np.full(3, -1.0), lin.C, lin.D)
    k, K = active_set_gains(q, lin)
    k0, K0 = unconstrained_gains(q)
    np.testing.assert_allclose(k, k0)
    np.testing.assert_allclose(K, K0)


def test_active_set_gains_single_row_nullspace(rng):
    q, lin, _ = random_instance(rng, 3, 2)
    lin = ConstraintLinearization(np.array([0.0, -1.0]), lin.C, lin.D)
    k, K = active_set_gains(q, lin)
    c, d = lin.C[0], lin.D[0]
    assert abs(c @ k) <= 1e-8
    np.testing.assert_allclose(c @ K + d, 0.0, atol=1e-8)
    # optimal within the null space: the gradient is parallel to c
    grad = q.Quu @ k + q.Qu
    P = np.eye(3) - np.outer(c, c) / (c @ c)
    np.testing.assert_allclose(P @ grad, 0.0, atol=1e-8)


def test_independent_rows_drops_duplicates():
    C = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert independent_rows(C) == [0, 2]


def test_active_set_backward_runs(rng):
    p = car_problem()
    traj = rollout(p.dynamics, p.x0, p.initial_controls)
    bw = active_set_backward(traj, p, RegState())
    assert np.all(np.isfinite(bw.gains.k)) and np.all(np.isfinite(bw.gains.K))


@pytest.mark.slow
def test_active_set_not_better_than_skkt_on_one_start():
    p = car_problem(horizon=200)
    _, rs = solve_skkt(p)
    _, ra = solve_active_set(p)
    assert rs.cost <= ra.cost
