"""AL warm start followed by S-KKT polishing under a control box."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .al import AlOptions, solve_al
from .core import Budget, Problem, SolverReport, Trajectory, rollout, total_cost
from .models import ControlBox, NoConstraints, StackedConstraints, max_violation
from .skkt import SkktOptions, solve_skkt

AL, SKKT, FALLBACK = "AL", "SKKT", "AL-fallback"


@dataclass
class SwitchConfig:
    al_violation_tol: float = 1e-2
    al_cost_tol: float = 1.0
    patience: int = 3
    cost_improvement: float = 8e-2
    violation_improvement: float = 0.1
    tighten: float = 0.1

    def __post_init__(self):
        if self.al_violation_tol <= 0 or self.al_cost_tol <= 0:
            raise ValueError("switching tolerances must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def tightened(self) -> "SwitchConfig":
        return replace(self, al_violation_tol=self.al_violation_tol * self.tighten,
                       al_cost_tol=self.al_cost_tol * self.tighten)


def _improved(prev: dict, cur: dict, cfg: SwitchConfig) -> bool:
    if prev["cost"] - cur["cost"] >= cfg.cost_improvement:
        return True
    pv, cv = prev["violation"], cur["violation"]
    return pv > 0 and (pv - cv) >= cfg.violation_improvement * pv


def switch_decision(history: list, cfg: SwitchConfig) -> str:
    """Next phase given the per-iteration records so far.

    Records carry ``phase``, ``cost``, ``violation`` and, for AL records,
    ``cost_change``. An empty history starts in the AL phase.
    """
    if not history:
        return AL
    last = history[-1]
    if last["phase"] != SKKT:
        ok = last["violation"] <= cfg.al_violation_tol and abs(last.get("cost_change", np.inf)) < cfg.al_cost_tol
        return SKKT if ok else AL
    stalled = 0
    for prev, cur in zip(history[-2::-1], history[::-1]):
        if cur["phase"] != SKKT:
            break
        if _improved(prev, cur, cfg):
            break
        stalled += 1
    return FALLBACK if stalled >= cfg.patience else SKKT


@dataclass
class HybridOptions:
    al: AlOptions = field(default_factory=AlOptions)
    skkt: SkktOptions = field(default_factory=SkktOptions)
    switch: SwitchConfig = field(default_factory=SwitchConfig)
    max_switches: int = 3
    time_budget: float | None = None


def solve_hybrid(problem: Problem, options: HybridOptions | None = None, *, traj: Trajectory | None = None,
                 budget: Budget | None = None):
    """AL until the loose switching tolerances hold, then S-KKT with the control box.

    If S-KKT stalls for ``patience`` iterations the solver returns to AL from
    the current iterate with tightened switching tolerances. Controls stay
    inside ``problem.u_lo``/``problem.u_hi`` exactly in every phase.
    """
    options = options or HybridOptions()
    budget = budget or Budget(options.time_budget)
    cfg = options.switch
    state_cons = problem.constraints or NoConstraints()
    full = state_cons
    if problem.u_lo is not None or problem.u_hi is not None:
        m = problem.dynamics.m
        lo = problem.u_lo if problem.u_lo is not None else np.full(m, -np.inf)
        hi = problem.u_hi if problem.u_hi is not None else np.full(m, np.inf)
        full = StackedConstraints(state_cons, ControlBox(lo, hi))
    if traj is None:
        traj = rollout(problem.dynamics, problem.x0, problem.initial_controls, u_lo=problem.u_lo, u_hi=problem.u_hi)
    history: list = []
    events: list = []
    pstate = None
    reason = "max_switches"
    iterations = inner = 0
    best = None
    for _ in range(options.max_switches + 1):
        al_opts = replace(options.al, violation_tol=cfg.al_violation_tol, cost_tol=cfg.al_cost_tol,
                          time_budget=_remaining(budget))
        traj, rep, pstate = solve_al(problem, al_opts, traj=traj, pstate=pstate, return_state=True)
        iterations += rep.iterations
        inner += rep.inner_iterations
        prev_cost = None
        for rec in rep.diagnostics:
            change = np.inf if prev_cost is None else prev_cost - rec["cost"]
            history.append({**rec, "phase": AL, "cost_change": change})
            prev_cost = rec["cost"]
        al_viol = max_violation(full, traj)
        best = (traj, al_viol)
        if rep.exit_reason != "converged" or switch_decision(history, cfg) != SKKT:
            reason = "al_not_converged" if rep.exit_reason != "budget" else "budget"
            events.append({"event": "stop", "phase": AL, "reason": rep.exit_reason})
            break
        events.append({"event": "switch", "to": SKKT, "after": len(history)})

        def watch(record):
            history.append({**record, "phase": SKKT})
            return switch_decision(history, cfg) == FALLBACK

        sk_opts = replace(options.skkt, time_budget=_remaining(budget))
        cand, srep = solve_skkt(problem, sk_opts, traj=traj, control_box=True, on_iteration=watch)
        iterations += srep.iterations
        inner += srep.inner_iterations
        if srep.exit_reason == "converged" or not srep.diagnostics:
            if srep.diagnostics and history[-1].get("iter") != srep.diagnostics[-1]["iter"]:
                history.append({**srep.diagnostics[-1], "phase": SKKT})
            traj = cand
            reason = srep.exit_reason
            break
        if srep.exit_reason != "stalled":
            traj = cand if srep.max_violation <= best[1] else best[0]
            reason = srep.exit_reason
            break
        events.append({"event": "fallback", "to": AL, "after": len(history)})
        cfg = cfg.tightened()
        traj = cand
        if budget.exceeded():
            reason = "budget"
            break
    J = total_cost(problem.cost, traj)
    report = SolverReport(cost=J, max_violation=max_violation(full, traj), iterations=iterations,
                          inner_iterations=inner, wall_time=budget.elapsed(), exit_reason=reason, solver="hybrid",
                          diagnostics=history + [{"events": events}])
    return traj, report


def _remaining(budget: Budget):
    if budget.seconds is None:
        return None
    return max(1e-9, budget.seconds - budget.elapsed())
