import numpy as np
import pytest

from cddp.core import Problem, QExpansion
from cddp.models import ConstraintLinearization, LinearDynamics, QuadraticCost
from cddp.skkt import SlackDualState


def random_lq(rng, n=4, m=2, N=50):
    """Random linear-quadratic problem with regulation to the origin."""
    A = np.eye(n) + 0.1 * rng.standard_normal((n, n))
    B = 0.5 * rng.standard_normal((n, m))
    Lq = rng.standard_normal((n, n))
    Q = 0.1 * (Lq @ Lq.T) + 0.1 * np.eye(n)
    Lr = rng.standard_normal((m, m))
    R = 0.1 * (Lr @ Lr.T) + 0.5 * np.eye(m)
    Qf = 5.0 * np.eye(n)
    x0 = rng.standard_normal(n)
    dyn = LinearDynamics(A, B)
    cost = QuadraticCost(Q, R, Qf, np.zeros(n))
    return Problem(dyn, cost, x0, N)


def riccati(A, B, Q, R, Qf, N):
    """Textbook finite-horizon discrete Riccati recursion for the 1/2-weighted cost.

    Returns the feedback gains ``u_k = K_k x_k`` and the cost-to-go matrices.
    """
    P = Qf.copy()
    Ks = [None] * N
    Ps = [None] * (N + 1)
    Ps[N] = P
    for k in range(N - 1, -1, -1):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
        P = 0.5 * (P + P.T)
        Ks[k], Ps[k] = K, P
    return np.array(Ks), Ps


def dense_kkt(q, lin, s, lam, mu_sigma, dx=None):
    """Monolithic linearized KKT system in (du, ds, dlam).

    Stationarity, complementarity and primal feasibility rows, assembled and
    solved as one dense matrix.
    """
    m, w = q.Qu.size, s.size
    C, D, g = lin.C, lin.D, lin.g
    dx = np.zeros(D.shape[1]) if dx is None else dx
    K = np.block([
        [q.Quu, np.zeros((m, w)), C.T],
        [np.zeros((w, m)), np.diag(lam), np.diag(s)],
        [C, np.eye(w), np.zeros((w, w))],
    ])
    rhs = np.concatenate([-q.Qu - C.T @ lam - q.Qux @ dx, -s * lam + mu_sigma, -(g + s + D @ dx)])
    sol = np.linalg.solve(K, rhs)
    return sol[:m], sol[m:m + w], sol[m + w:]


def random_instance(rng, m, w, n=3):
    L = rng.standard_normal((m, m))
    q = QExpansion(rng.standard_normal(n), rng.standard_normal(m), np.eye(n), rng.standard_normal((m, n)),
                   L @ L.T + 0.5 * np.eye(m))
    lin = ConstraintLinearization(rng.uniform(-1, 0.2, w), rng.standard_normal((w, m)), rng.standard_normal((w, n)))
    state = SlackDualState(rng.uniform(0.05, 2, w), rng.uniform(0.05, 2, w))
    return q, lin, state


def composed_fd(cmodel, model, x, u, h=1e-6):
    """Finite-difference C, D of the rows as explicit maps of (x_k, u_k).

    Position rows go through two steps (the second control is irrelevant to
    the position block), velocity rows through one, control rows none.
    """
    u_any = np.zeros(model.m)

    def rows(x, u):
        x1 = model.step(x, u)
        x2 = model.step(x1, u_any)
        return np.concatenate([cmodel.g_p(x2), cmodel.g_v(x1), cmodel.g_c(x, u)])

    C = np.column_stack([(rows(x, u + h * e) - rows(x, u - h * e)) / (2 * h) for e in np.eye(u.size)])
    D = np.column_stack([(rows(x + h * e, u) - rows(x - h * e, u)) / (2 * h) for e in np.eye(x.size)])
    return rows(x, u), C, D


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)), initial=0.0))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
