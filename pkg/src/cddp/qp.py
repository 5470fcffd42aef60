"""Small dense convex QPs.

``solve_qp`` is a primal active-set method for

    min 1/2 z'Hz + q'z   s.t.  A z <= b,  lo <= z <= hi

with an LP phase-1 for a feasible start and for infeasibility detection.
``solve_box_qp`` handles the pure box case with a projected Newton method.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


class QpError(RuntimeError):
    pass


@dataclass
class QpProblem:
    H: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        m = self.q.size
        if self.A is None or np.size(self.A) == 0:
            self.A = np.zeros((0, m))
            self.b = np.zeros(0)
        else:
            self.A = np.asarray(self.A, dtype=float).reshape(-1, m)
            self.b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if self.lo is not None:
            self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (m,)).copy()
        if self.hi is not None:
            self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (m,)).copy()

    def stacked(self):
        """All constraints as ``G z <= h`` plus labels for each row."""
        m = self.q.size
        G, h, labels = [self.A], [self.b], [("A", i) for i in range(self.A.shape[0])]
        if self.hi is not None:
            idx = np.flatnonzero(np.isfinite(self.hi))
            G.append(np.eye(m)[idx])
            h.append(self.hi[idx])
            labels += [("hi", int(i)) for i in idx]
        if self.lo is not None:
            idx = np.flatnonzero(np.isfinite(self.lo))
            G.append(-np.eye(m)[idx])
            h.append(-self.lo[idx])
            labels += [("lo", int(i)) for i in idx]
        return np.vstack(G), np.concatenate(h), labels

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.q @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    active: list = field(default_factory=list)
    status: str = OPTIMAL
    multipliers: np.ndarray | None = None
    iterations: int = 0
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _check_spd(H):
    if not np.allclose(H, H.T, atol=1e-10 * max(1.0, np.abs(H).max(initial=0.0))):
        raise ValueError("H must be symmetric")
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise ValueError("H must be positive definite") from None


def phase_one(G, h):
    """Minimize the largest violation ``max(G z - h)``; returns ``(z, t)``."""
    p, m = G.shape
    c = np.zeros(m + 1)
    c[-1] = 1.0
    A_ub = np.hstack([G, -np.ones((p, 1))])
    bounds = [(None, None)] * m + [(0.0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=h, bounds=bounds, method="highs")
    if res.status != 0:
        raise QpError(f"phase-1 LP failed: {res.message}")
    z = res.x[:m]
    return z, float(max(0.0, np.max(G @ z - h)))


def solve_qp(prob: QpProblem, z0=None, *, feas_tol: float = 1e-10, max_iter: int | None = None) -> QpSolution:
    """Primal active-set QP solve; ``z0`` is an optional warm start."""
    H, q = prob.H, prob.q
    L = _check_spd(H)
    m = q.size
    G, h, labels = prob.stacked()
    # unit row norms keep the ratio test and the KKT solves well scaled
    norms = np.linalg.norm(G, axis=1)
    norms[norms == 0] = 1.0
    G, h = G / norms[:, None], h / norms
    p = G.shape[0]
    cap = max_iter or 100 * (m + p)

    z_free = -np.linalg.solve(L.T, np.linalg.solve(L, q))
    if p == 0:
        return _finish(prob, z_free, [], labels, np.zeros(0), 0)

    def feasible(z):
        return np.all(G @ z - h <= feas_tol)

    if feasible(z_free):
        return _finish(prob, z_free, [], labels, np.zeros(0), 0)
    z = None
    for cand in (z0, np.zeros(m)):
        if cand is not None and feasible(np.asarray(cand, float)):
            z = np.array(cand, dtype=float)
            break
    if z is None:
        z, t = phase_one(G, h)
        if t > feas_tol:
            return QpSolution(z=z, status=INFEASIBLE, lower=np.zeros(m, bool), upper=np.zeros(m, bool))

    W: list[int] = []
    for it in range(1, cap + 1):
        grad = H @ z + q
        nw = len(W)
        if nw:
            AW = G[W]
            K = np.block([[H, AW.T], [AW, np.zeros((nw, nw))]])
            sol = np.linalg.solve(K, np.concatenate([-grad, np.zeros(nw)]))
            step, lam = sol[:m], sol[m:]
        else:
            step = -np.linalg.solve(L.T, np.linalg.solve(L, grad))
            lam = np.zeros(0)
        if np.linalg.norm(step) <= 1e-13 * (1.0 + np.linalg.norm(z)):
            if nw == 0 or lam.min() >= -1e-12:
                return _finish(prob, z, W, labels, lam / norms[W], it)
            W.pop(int(np.argmin(lam)))
            continue
        Gp = G @ step
        slack = np.maximum(h - G @ z, 0.0)
        alpha, block = 1.0, None
        tiny = 1e-14 * np.linalg.norm(step)
        for i in range(p):
            if i in W or Gp[i] <= tiny:
                continue
            a = slack[i] / Gp[i]
            if a < alpha:
                alpha, block = a, i
        z = z + alpha * step
        if block is None:
            continue
        partner = _dependent_partner(G[W], G[block])
        if partner is None:
            W.append(block)
        else:
            # near-parallel to the working set: the blocking row is the tighter one
            W[partner] = block
    raise QpError(f"active-set QP hit its iteration cap ({cap})")


def _dependent_partner(AW, row, tol: float = 1e-8):
    """Index of the working row ``row`` leans on most if it is numerically in their span."""
    if AW.shape[0] == 0:
        return None
    coef = np.linalg.lstsq(AW.T, row, rcond=None)[0]
    if np.linalg.norm(AW.T @ coef - row) > tol:
        return None
    return int(np.argmax(np.abs(coef)))


def _finish(prob, z, W, labels, lam, it):
    m = z.size
    lower = np.zeros(m, bool)
    upper = np.zeros(m, bool)
    mult = np.zeros(len(labels))
    for j, i in enumerate(W):
        kind, idx = labels[i]
        mult[i] = lam[j]
        if kind == "lo":
            lower[idx] = True
        elif kind == "hi":
            upper[idx] = True
    active = sorted(W)
    if prob.lo is not None or prob.hi is not None:
        lo = prob.lo if prob.lo is not None else -np.inf
        hi = prob.hi if prob.hi is not None else np.inf
        z = np.clip(z, lo, hi)
    return QpSolution(z=z, active=active, status=OPTIMAL, multipliers=mult, iterations=it, lower=lower, upper=upper)


def solve_box_qp(H, q, lo, hi, z0=None, *, tol: float = 1e-12, max_iter: int = 100) -> QpSolution:
    """Projected Newton for ``min 1/2 z'Hz + q'z`` on ``lo <= z <= hi``.

    Returned ``z`` lies in the box exactly. ``lower``/``upper`` flag the
    clamped coordinates; ``active`` lists them as indices.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    m = q.size
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,))
    if np.any(lo > hi):
        raise ValueError("empty box: lo > hi")
    _check_spd(H)

    def f(z):
        return 0.5 * z @ H @ z + q @ z

    z = np.clip(np.zeros(m) if z0 is None else np.asarray(z0, float), lo, hi)
    clamped = np.zeros(m, bool)
    for it in range(1, max_iter + 1):
        grad = H @ z + q
        clamped = ((z <= lo) & (grad > 0)) | ((z >= hi) & (grad < 0))
        free = ~clamped
        if not free.any() or np.linalg.norm(grad[free]) <= tol * (1.0 + np.linalg.norm(q)):
            break
        target = z.copy()
        Hff = H[np.ix_(free, free)]
        target[free] = np.linalg.solve(Hff, -(q[free] + H[np.ix_(free, clamped)] @ z[clamped]))
        search = target - z
        fz = f(z)
        gs = grad @ search
        step = 1.0
        while True:
            cand = np.clip(z + step * search, lo, hi)
            if f(cand) <= fz + 0.1 * step * gs or step < 1e-20:
                break
            step *= 0.6
        if np.array_equal(cand, z):
            break
        z = cand
    else:
        raise QpError("box QP hit its iteration cap")
    grad = H @ z + q
    lower = (z <= lo) & (grad >= 0) & np.isfinite(lo)
    upper = (z >= hi) & (grad <= 0) & np.isfinite(hi)
    # snap free coordinates to the exact reduced Newton solution
    free = ~(lower | upper)
    if free.any():
        fixed = ~free
        z = z.copy()
        z[free] = np.linalg.solve(H[np.ix_(free, free)], -(q[free] + H[np.ix_(free, fixed)] @ z[fixed]))
        z = np.clip(z, lo, hi)
    return QpSolution(z=z, active=list(np.flatnonzero(lower | upper)), status=OPTIMAL,
                      iterations=it, lower=lower, upper=upper)


def kkt_residuals(prob: QpProblem, z, mult=None):
    """Independent KKT check: ``(stationarity, primal violation, dual violation, complementarity)``.

    Multipliers are recovered by nonnegative least squares on the rows
    active at ``z`` when not supplied.
    """
    from scipy.optimize import nnls

    G, h, _ = prob.stacked()
    grad = prob.H @ z + prob.q
    r = G @ z - h
    if mult is None:
        act = np.flatnonzero(r >= -1e-9)
        mult = np.zeros(G.shape[0])
        if act.size:
            lam, _ = nnls(G[act].T, -grad)
            mult[act] = lam
    stat = float(np.linalg.norm(grad + G.T @ mult, np.inf)) if G.size else float(np.linalg.norm(grad, np.inf))
    primal = float(max(0.0, r.max(initial=0.0)))
    dual = float(max(0.0, -mult.min(initial=0.0)))
    comp = float(np.abs(mult * r).max(initial=0.0))
    return stat, primal, dual, comp
