"""Benchmark harness: transient runs of every solver configuration, CSV reports
and the cross-method equivalence check."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .coupling import CoupledProblem, CouplingConfig, CouplingError, write_coupling_log
from .discretize import (
    SOLVER_CHOICES,
    DarcyStepper,
    MonolithicStepper,
    ScenarioConfig,
    StokesStepper,
    build_grid,
    read_key_values,
)
from .krylov import RestartController, pd_gmres
from .precond import build_block_preconditioner
from .sparse import fill_in_report, lu_factor, lu_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverWiring:
    """One solver configuration: how the system and its subsystems are solved."""

    name: str
    label: str
    monolithic: bool
    iterative: bool
    block: str | None = None      # td_bj, td_bgs, pv_bj, pv_bgs
    first: str | None = None      # preconditioner of the free-flow / velocity block
    last: str | None = None       # preconditioner of the porous block
    stokes: str | None = None     # partitioned free-flow solver
    darcy: str | None = None      # partitioned porous solver


WIRINGS = {w.name: w for w in (
    SolverWiring("umfpack", "UMFPACK", True, False),
    SolverWiring("precice_umfpack", "preCICE UMFPACK", False, True, stokes="direct", darcy="direct"),
    SolverWiring("precice_uzawa_e_amg", "preCICE P(Uzawa_e, AMG)", False, True, stokes="uzawa_e", darcy="amg"),
    SolverWiring("precice_uzawa_amg", "preCICE P(Uzawa, AMG)", False, True, stokes="uzawa", darcy="amg"),
    SolverWiring("pv_bj_amg_amg", "PD-GMRES P^pv_BJ(AMG, AMG)", True, True, "pv_bj", "amg", "amg"),
    SolverWiring("pv_bgs_amg_amg", "PD-GMRES P^pv_BGS(AMG, AMG)", True, True, "pv_bgs", "amg", "amg"),
    SolverWiring("td_bj_uzawa_amg", "PD-GMRES P^td_BJ(Uzawa, AMG)", True, True, "td_bj", "uzawa", "amg"),
    SolverWiring("td_bgs_uzawa_amg", "PD-GMRES P^td_BGS(Uzawa, AMG)", True, True, "td_bgs", "uzawa", "amg"),
    SolverWiring("td_bj_uzawa_ilu0", "PD-GMRES P^td_BJ(Uzawa, ILU0)", True, True, "td_bj", "uzawa", "ilu0"),
    SolverWiring("td_bgs_uzawa_ilu0", "PD-GMRES P^td_BGS(Uzawa, ILU0)", True, True, "td_bgs", "uzawa", "ilu0"),
)}
assert tuple(WIRINGS) == SOLVER_CHOICES


def wiring(name) -> SolverWiring:
    try:
        return WIRINGS[name]
    except KeyError:
        raise ValueError(f"unknown configuration {name!r}; expected one of {SOLVER_CHOICES}") from None


@dataclass
class BenchRecord:
    config: str
    grid_size: int
    dof: int
    step: int
    t: float
    wall_time: float
    outer_iterations: int
    coupling_iterations: int
    final_residual: float
    tolerance: float
    converged: bool
    memory_floats: int
    contended: bool = False


@dataclass
class BenchmarkPlan:
    sizes: tuple
    configs: tuple
    repetitions: int = 3
    output: str = "results"
    n_steps: int | None = None
    seed: int = 0
    parallel: bool = False

    def __post_init__(self):
        if not self.sizes or not self.configs:
            raise ValueError("a plan needs at least one size and one configuration")
        for c in self.configs:
            wiring(c)
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")


def _split(value, cast=str):
    return tuple(cast(v.strip()) for v in value.split(",") if v.strip())


def load_plan(path) -> BenchmarkPlan:
    """``key = value`` plan file: ``sizes``, ``configs`` (or ``all``), ``repetitions``,
    ``output``, ``n_steps``, ``seed``, ``parallel``."""
    values = {}
    for lineno, key, value in read_key_values(path):
        if key == "sizes":
            values[key] = _split(value, int)
        elif key == "configs":
            values[key] = SOLVER_CHOICES if value.strip() == "all" else _split(value)
        elif key in ("repetitions", "n_steps", "seed"):
            values[key] = int(value)
        elif key == "output":
            values[key] = value
        elif key == "parallel":
            values[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            raise ValueError(f"{path}:{lineno}: unknown plan key {key!r}")
    return BenchmarkPlan(**values)


# ---------------------------------------------------------------------------
# transient runs


class _Run:
    """State shared by the time steps of one (configuration, size) run."""

    def __init__(self, cfg: ScenarioConfig, wire: SolverWiring, coupling_cfg: CouplingConfig | None,
                 tol_factor: float):
        self.cfg, self.wire = cfg, wire
        self.grid = build_grid(cfg)
        self.tol_factor = tol_factor
        self.mono = MonolithicStepper(self.grid, cfg)
        self.problem = None
        # previous step as initial guess for the monolithic Krylov solves
        self.last_solution = None
        if not wire.monolithic:
            base = CouplingConfig() if coupling_cfg is None else coupling_cfg
            ccfg = replace(base, stokes_solver=wire.stokes, darcy_solver=wire.darcy)
            steppers = (StokesStepper(self.grid, cfg), DarcyStepper(self.grid, cfg))
            self.problem = CoupledProblem(cfg, ccfg, steppers=steppers)

    def direct_tolerance(self, system):
        x = lu_solve(lu_factor(system.matrix), system.rhs)
        return self.tol_factor * float(np.linalg.norm(system.rhs - system.matrix @ x))

    def step(self, v_prev, t, step):
        """Solve one time step; returns ``(solution, metrics, wall time)``."""
        system = self.mono.system(v_prev, t)
        w = self.wire
        if w.monolithic and not w.iterative:
            start = time.perf_counter()
            F = lu_factor(system.matrix)
            x = lu_solve(F, system.rhs)
            wall = time.perf_counter() - start
            res = float(np.linalg.norm(system.rhs - system.matrix @ x))
            return x, dict(outer_iterations=0, coupling_iterations=0, final_residual=res, tolerance=res,
                           converged=True, memory_floats=F.fill_stats.nnz_factors + 2 * system.rhs.size)
        if w.monolithic:
            tol = self.direct_tolerance(system)
            start = time.perf_counter()
            P = build_block_preconditioner(system, w.block, w.first, w.last)
            ctrl = RestartController()
            x, rep = pd_gmres(system.matrix, P, system.rhs, tol, max_restarts=5000, ctrl=ctrl,
                              x0=self.last_solution)
            wall = time.perf_counter() - start
            self.last_solution = x
            memory = P.storage + (2 * ctrl.m_max + 2) * system.rhs.size
            return x, dict(outer_iterations=rep.iterations, coupling_iterations=0,
                           final_residual=float(rep.final_residual), tolerance=tol,
                           converged=rep.converged, memory_floats=memory, wall=wall)
        start = time.perf_counter()
        self.problem.setup_solvers()
        inner_before = self.problem.ff.inner_iterations + self.problem.pm.inner_iterations
        try:
            x, its = self.problem.timestep(v_prev, t, step)
            ok = self.problem.log[-1].converged
        except CouplingError as exc:
            logger.warning("%s: %s", w.name, exc)
            x, its, ok = np.zeros(self.grid.n_dof), 0, False
        wall = time.perf_counter() - start
        inner = self.problem.ff.inner_iterations + self.problem.pm.inner_iterations - inner_before
        res = float(np.linalg.norm(system.rhs - system.matrix @ x))
        return x, dict(outer_iterations=inner, coupling_iterations=its, final_residual=res,
                       tolerance=float("nan"), converged=ok, memory_floats=self.problem.storage, wall=wall)


def run_transient(cfg: ScenarioConfig, config_name=None, repetitions=1, n_steps=None,
                  coupling_cfg=None, tol_factor=10.0, return_solutions=False):
    """Backward Euler run from rest with one solver configuration.

    Each time step is solved ``repetitions`` times from scratch (setup
    included, assembly excluded); the median wall time is recorded.  Returns
    the per-step :class:`BenchRecord` list, and the last solution when
    ``return_solutions`` is set.
    """
    name = cfg.solver if config_name is None else config_name
    wire = wiring(name)
    n_steps = cfg.n_steps if n_steps is None else n_steps
    runs = [_Run(cfg, wire, coupling_cfg, tol_factor) for _ in range(repetitions)]
    g = runs[0].grid
    v_prev = np.zeros(g.n_velocity)
    records, x = [], np.zeros(g.n_dof)
    for step in range(1, n_steps + 1):
        t = step * cfg.dt
        times = []
        for run in runs:
            start = time.perf_counter()
            x, m = run.step(v_prev, t, step)
            times.append(m.pop("wall", time.perf_counter() - start))
        if not m["converged"]:
            logger.warning("%s n=%d step %d did not converge", name, g.n, step)
        records.append(BenchRecord(name, g.n, g.n_dof, step, t, statistics.median(times), **m))
        v_prev = x[: g.n_velocity]
    if return_solutions:
        return records, x, runs[0]
    return records


RUNTIME_FIELDS = ("config", "grid_size", "dof", "steps", "wall_time_per_step", "outer_iterations_per_step",
                  "coupling_iterations_per_step", "max_final_residual", "max_residual_ratio",
                  "converged", "memory_floats", "contended")
STEP_FIELDS = tuple(f.name for f in fields(BenchRecord))
FILL_FIELDS = ("grid_size", "dof", "entries_per_dof_matrix", "entries_per_dof_factors")


def summarize(records, contended=False):
    """Collapse per-step records into one runtime-table row."""
    r0 = records[0]
    ratios = [r.final_residual / r.tolerance for r in records
              if np.isfinite(r.tolerance) and r.tolerance > 0]
    return {
        "config": r0.config, "grid_size": r0.grid_size, "dof": r0.dof, "steps": len(records),
        "wall_time_per_step": statistics.fmean(r.wall_time for r in records),
        "outer_iterations_per_step": statistics.fmean(r.outer_iterations for r in records),
        "coupling_iterations_per_step": statistics.fmean(r.coupling_iterations for r in records),
        "max_final_residual": max(r.final_residual for r in records),
        "max_residual_ratio": max(ratios) if ratios else float("nan"),
        "converged": int(all(r.converged for r in records)),
        "memory_floats": max(r.memory_floats for r in records),
        "contended": int(contended),
    }


def fill_in_rows(sizes, cfg: ScenarioConfig | None = None):
    cfg = ScenarioConfig() if cfg is None else cfg
    rows = []
    for n in sizes:
        c = replace(cfg, cells_per_unit_square=n)
        system = MonolithicStepper(build_grid(c), c).system(None, c.dt)
        stats = fill_in_report(system.matrix)
        rows.append({"grid_size": n, "dof": stats.n_rows,
                     "entries_per_dof_matrix": stats.entries_per_dof_matrix,
                     "entries_per_dof_factors": stats.entries_per_dof_factors})
    return rows


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for k, v in row.items()})
    return path


def run_plan(plan: BenchmarkPlan, cfg: ScenarioConfig | None = None, out_dir=None):
    """Run every (configuration, size) cell; writes ``runtime.csv``,
    ``steps.csv``, ``fill_in.csv`` and ``coupling_log.csv``.  Returns the paths."""
    cfg = ScenarioConfig() if cfg is None else cfg
    out = Path(plan.output if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(name, n) for n in plan.sizes for name in plan.configs]

    def one(cell):
        name, n = cell
        c = replace(cfg, cells_per_unit_square=n, solver=name)
        records, _, run = run_transient(c, name, plan.repetitions, plan.n_steps, return_solutions=True)
        log = run.problem.log if run.problem is not None else []
        return records, log

    if plan.parallel:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(one, cells))
    else:
        results = [one(cell) for cell in cells]

    runtime_rows, step_rows, coupling_rows = [], [], []
    for (name, n), (records, log) in zip(cells, results):
        for r in records:
            r.contended = plan.parallel
        runtime_rows.append(summarize(records, plan.parallel))
        step_rows.extend(asdict(r) for r in records)
        coupling_rows.extend((name, n, e) for e in log)
    paths = {
        "runtime": write_csv(out / "runtime.csv", RUNTIME_FIELDS, runtime_rows),
        "steps": write_csv(out / "steps.csv", STEP_FIELDS, step_rows),
        "fill_in": write_csv(out / "fill_in.csv", FILL_FIELDS, fill_in_rows(plan.sizes, cfg)),
    }
    log_path = out / "coupling_log.csv"
    with log_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("config", "grid_size", "time_step", "t", "iterations", "converged",
                    "pressure_measure", "velocity_measure"))
        for name, n, e in coupling_rows:
            w.writerow([name, n, e.time_step, repr(float(e.t)), e.iterations, int(e.converged),
                        repr(float(e.pressure_measure)), repr(float(e.velocity_measure))])
    paths["coupling_log"] = log_path
    return paths


# ---------------------------------------------------------------------------
# cross-method verification


@dataclass
class VerifyResult:
    size: int
    final_solutions: dict
    records: dict
    max_pairwise: float
    stopping_failures: list
    convergence_failures: list
    tolerance: float

    @property
    def passed(self):
        return (self.max_pairwise <= self.tolerance and not self.stopping_failures
                and not self.convergence_failures)


def verify(size=6, configs=SOLVER_CHOICES, n_steps=None, tolerance=1e-6, cfg=None, coupling_log=None):
    """Run each configuration to the final time step and compare the solutions pairwise.

    Also checks that every converged monolithic iterative solve stopped at or
    below ten times the direct residual of the same system.
    """
    cfg = ScenarioConfig() if cfg is None else cfg
    cfg = replace(cfg, cells_per_unit_square=size)
    finals, all_records = {}, {}
    for name in configs:
        records, x, run = run_transient(replace(cfg, solver=name), name, n_steps=n_steps,
                                        return_solutions=True)
        finals[name] = x
        all_records[name] = records
        if coupling_log is not None and run.problem is not None:
            write_coupling_log(coupling_log, run.problem.log, append=True)
    names = list(finals)
    worst = 0.0
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            denom = max(np.linalg.norm(finals[a]), np.linalg.norm(finals[b]), np.finfo(float).tiny)
            worst = max(worst, float(np.linalg.norm(finals[a] - finals[b]) / denom))
    stopping, failures = [], []
    for name, recs in all_records.items():
        for r in recs:
            if not r.converged:
                failures.append((name, r.step))
            elif np.isfinite(r.tolerance) and r.final_residual > r.tolerance:
                stopping.append((name, r.step, r.final_residual, r.tolerance))
    return VerifyResult(size, finals, all_records, worst, stopping, failures, tolerance)
