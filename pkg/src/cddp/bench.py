"""Experiment harness: JSON configs, solver x start matrices, metrics tables and trajectory CSVs."""

from __future__ import annotations

import copy
import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Trajectory, dynamics_defect, total_cost
from .estimators import SOLVERS, make_solver
from .models import NoConstraints, constraint_values, max_violation
from . import problems as problem_lib

METRIC_COLUMNS = ("Cost", "Time", "Feas. g", "Feas. f")
DEFAULT_STARTS = {
    "car": problem_lib.CAR_STARTS,
    "cartpole": problem_lib.CARTPOLE_X0[None, :],
    "quadrotor": problem_lib.QUAD_STARTS,
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending field path."""


@dataclass
class ExperimentConfig:
    model: str
    problem: dict = field(default_factory=dict)
    starts: object = "default"
    solvers: list = field(default_factory=list)
    warm_start: dict | None = None
    budget: float | None = None
    seed: int = 0
    name: str = "experiment"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        if "solver" in data and "solvers" not in data:
            data["solvers"] = [data.pop("solver")]
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        if "model" not in data:
            raise ConfigError("model: required")
        solvers = [{"name": s} if isinstance(s, str) else dict(s) for s in data.get("solvers", [])]
        data["solvers"] = solvers
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.model not in problem_lib.PROBLEMS:
            raise ConfigError(f"model: unknown model {self.model!r}; choose from {sorted(problem_lib.PROBLEMS)}")
        if not self.solvers:
            raise ConfigError("solvers: at least one solver is required")
        for i, s in enumerate(self.solvers):
            name = s.get("name")
            if name not in SOLVERS:
                raise ConfigError(f"solvers[{i}].name: unknown solver {name!r}; choose from {sorted(SOLVERS)}")
            try:
                SOLVERS[name](**_solver_params(s))
            except TypeError as exc:
                raise ConfigError(f"solvers[{i}]: {exc}") from None
        horizon = self.problem.get("horizon", 2)
        if not isinstance(horizon, int) or horizon < 2:
            raise ConfigError("problem.horizon: must be an integer >= 2")
        if self.budget is not None and not self.budget > 0:
            raise ConfigError("budget: must be positive")
        if self.warm_start is not None and not isinstance(self.warm_start, dict):
            raise ConfigError("warm_start: must be an object")
        self.start_states()

    def start_states(self) -> np.ndarray:
        starts = self.starts
        if isinstance(starts, str):
            if starts != "default":
                raise ConfigError(f"starts: unknown start set {starts!r}")
            return np.array(DEFAULT_STARTS[self.model], dtype=float)
        if isinstance(starts, dict):
            try:
                rng = np.random.default_rng(self.seed)
                lo = np.asarray(starts["low"], float)
                hi = np.asarray(starts["high"], float)
                return rng.uniform(lo, hi, size=(int(starts["random"]), lo.size))
            except KeyError as exc:
                raise ConfigError(f"starts.{exc.args[0]}: required for random starts") from None
        arr = np.atleast_2d(np.asarray(starts, dtype=float))
        if arr.size == 0:
            raise ConfigError("starts: empty")
        return arr


def _solver_params(entry: dict) -> dict:
    return {k: v for k, v in entry.items() if k != "name"}


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; integer segments index lists."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like path=value")
        path, raw = item.split("=", 1)
        keys = path.split(".")
        node = data
        for key in keys[:-1]:
            if isinstance(node, list):
                node = node[int(key)]
            else:
                node = node.setdefault(key, {})
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = parse_value(raw)
        else:
            node[last] = parse_value(raw)
    return data


def load_config(path, overrides=None) -> ExperimentConfig:
    with open(path) as fh:
        data = json.load(fh)
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class Cell:
    solver: str
    start: int
    report: object = None
    trajectory: Trajectory | None = None
    error: str | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


def build_problem(cfg: ExperimentConfig, x0, **extra):
    factory = problem_lib.PROBLEMS[cfg.model]
    kwargs = {**cfg.problem, **extra}
    return factory(np.asarray(x0, float), **kwargs)


def measure(problem, traj: Trajectory) -> dict:
    """Harness-side metrics recomputed from the trajectory alone."""
    cmodel = problem.constraints or NoConstraints()
    if problem.u_lo is not None or problem.u_hi is not None:
        from .models import ControlBox, StackedConstraints

        m = problem.dynamics.m
        lo = problem.u_lo if problem.u_lo is not None else np.full(m, -np.inf)
        hi = problem.u_hi if problem.u_hi is not None else np.full(m, np.inf)
        cmodel = StackedConstraints(cmodel, ControlBox(lo, hi))
    return {"Cost": total_cost(problem.cost, traj), "Feas. g": max_violation(cmodel, traj),
            "Feas. f": dynamics_defect(problem.dynamics, traj)}


def run_cell(cfg: ExperimentConfig, solver_entry: dict, start_index: int, budget=None) -> Cell:
    name = solver_entry["name"]
    x0 = cfg.start_states()[start_index]
    cell = Cell(name, start_index)
    try:
        problem = build_problem(cfg, x0)
        init = None
        if cfg.warm_start:
            ws = dict(cfg.warm_start)
            ws_solver = ws.pop("solver", name)
            warm_problem = build_problem(cfg, x0, **ws)
            init = make_solver(ws_solver).fit(warm_problem).trajectory_
        params = _solver_params(solver_entry)
        b = budget if budget is not None else cfg.budget
        if b is not None:
            params["time_budget"] = b
        est = make_solver(name, **params)
        est.fit(problem, init)
        cell.report = est.report_
        cell.trajectory = est.trajectory_
        cell.metrics = {**measure(problem, est.trajectory_), "Time": est.report_.wall_time}
        if not all(math.isfinite(v) for v in cell.metrics.values()):
            cell.error = "non-finite metrics"
    except Exception as exc:  # recorded per cell, the matrix keeps going
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, *, budget=None, jobs: int = 1, starts=None) -> list:
    """Run every solver on every start (or the given start indices); cells come in (solver, start) order."""
    indices = range(len(cfg.start_states())) if starts is None else starts
    tasks = [(cfg, s, i, budget) for s in cfg.solvers for i in indices]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_cell_args, tasks))
    return [run_cell(*t) for t in tasks]


def summarize(cells: list, *, average: bool = True) -> list:
    """Metric rows: one per solver (mean over starts) or one per cell.

    A solver with any failed cell gets ``None`` (rendered ``N/A``) metrics.
    """
    rows = []
    if not average:
        for c in cells:
            rows.append({"Solver": c.solver, "Start": c.start,
                         **{k: (c.metrics.get(k) if c.ok else None) for k in METRIC_COLUMNS}})
        return rows
    order = []
    for c in cells:
        if c.solver not in order:
            order.append(c.solver)
    for name in order:
        group = [c for c in cells if c.solver == name]
        if all(c.ok for c in group):
            vals = {k: float(np.mean([c.metrics[k] for c in group])) for k in METRIC_COLUMNS}
        else:
            vals = {k: None for k in METRIC_COLUMNS}
        rows.append({"Solver": name, "Runs": len(group), **vals})
    return rows


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _fmt(v, precise: bool) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, float):
        return f"{v:.17g}" if precise else f"{v:.6g}"
    return str(v)


def emit_metrics(rows: list, path=None, fmt: str = "csv") -> str:
    """Render rows as CSV (17 significant digits) or an aligned text table; writes ``path`` if given."""
    if not rows:
        raise ValueError("no rows to emit")
    header = list(rows[0].keys())
    if fmt == "csv":
        lines = [",".join(header)] + [",".join(_fmt(r[h], True) for h in header) for r in rows]
    elif fmt == "text":
        cells = [header] + [[_fmt(r[h], False) for h in header] for r in rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    else:
        raise ValueError(f"unknown format {fmt!r}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def emit_trajectory(traj: Trajectory, constraints, path) -> None:
    """CSV with columns ``t, x1.., u1.., g1..``; the control cells of the last knot are empty."""
    cmodel = constraints or NoConstraints()
    N, n, m = traj.horizon, traj.n, traj.m
    G = constraint_values(cmodel, traj) if cmodel.w else np.zeros((N + 1, 0))
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] + \
             [f"g{i + 1}" for i in range(cmodel.w)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(N + 1):
            row = [repr(float(k * traj.dt))] + [repr(float(v)) for v in traj.states[k]]
            row += [repr(float(v)) for v in traj.controls[k]] if k < N else [""] * m
            row += ["" if not np.isfinite(v) else repr(float(v)) for v in G[k]]
            writer.writerow(row)


def read_trajectory(path, n: int, m: int, dt: float) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    X = np.array([[float(v) for v in r[1:1 + n]] for r in rows])
    U = np.array([[float(v) for v in r[1 + n:1 + n + m]] for r in rows[:-1]])
    return Trajectory(X, U, dt)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def emit_diagnostics(cells: list, path) -> None:
    out = []
    for c in cells:
        entry = {"solver": c.solver, "start": c.start, "error": c.error, "metrics": c.metrics}
        if c.report is not None:
            entry["report"] = asdict(c.report)
        out.append(entry)
    Path(path).write_text(json.dumps(out, default=_jsonable, indent=1))


def write_outputs(cfg: ExperimentConfig, cells: list, out_dir, *, average: bool = True) -> None:
    out = Path(out_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    rows = summarize(cells, average=average)
    emit_metrics(rows, out / "metrics.csv", "csv")
    emit_metrics(rows, out / "metrics.txt", "text")
    emit_diagnostics(cells, out / "diagnostics.json")
    for c in cells:
        if c.trajectory is not None:
            problem = build_problem(cfg, cfg.start_states()[c.start])
            emit_trajectory(c.trajectory, problem.constraints, out / "trajectories" / f"{c.solver}_start{c.start}.csv")
