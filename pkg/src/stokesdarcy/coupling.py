"""Partitioned Dirichlet-Neumann coupling of the free flow and the porous medium.

The free-flow solver takes the interface normal velocity and returns the
interface normal-stress pressure; the porous solver takes that pressure and
returns a new interface velocity.  The loop iterates on the velocity, either
with plain fixed-point (Picard) steps or with the interface quasi-Newton
least-squares (IQN-ILS) update.  Both participants live in this process and
are called in serial order: free flow first, porous medium second.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .discretize import (
    DarcyStepper,
    ScenarioConfig,
    StaggeredGrid,
    StokesStepper,
    build_grid,
)
from .krylov import RestartController, bicgstab, pd_gmres
from .precond import AMG, Uzawa, UzawaConfig
from .sparse import as_csr, lu_factor, lu_solve

logger = logging.getLogger(__name__)

ACCELERATIONS = ("picard", "iqn_ils")
STOKES_SOLVERS = ("direct", "uzawa_e", "uzawa")
DARCY_SOLVERS = ("direct", "amg")


class CouplingError(RuntimeError):
    """Inner solver failure or coupling non-convergence; carries the log."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class CouplingConfig:
    epsilon: float = 1e-8
    max_coupling_iterations: int = 100
    acceleration: str = "iqn_ils"
    omega0: float = 0.5
    filter_tolerance: float = 1e-12
    capacity: int | None = None
    zero_guard: float = 1e-14
    stokes_solver: str = "direct"
    darcy_solver: str = "direct"
    inner_rtol: float = 1e-10
    raise_on_failure: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.acceleration not in ACCELERATIONS:
            raise ValueError(f"acceleration must be one of {ACCELERATIONS}")
        if self.stokes_solver not in STOKES_SOLVERS:
            raise ValueError(f"stokes_solver must be one of {STOKES_SOLVERS}")
        if self.darcy_solver not in DARCY_SOLVERS:
            raise ValueError(f"darcy_solver must be one of {DARCY_SOLVERS}")
        if not 0.0 < self.omega0 <= 1.0:
            raise ValueError("omega0 must lie in (0, 1]")
        if self.max_coupling_iterations < 1:
            raise ValueError("max_coupling_iterations must be positive")


# ---------------------------------------------------------------------------
# IQN-ILS


@dataclass
class IQNILSHistory:
    """Difference columns of residuals (``V``) and solver outputs (``W``)."""

    dimension: int
    capacity: int | None = None
    filter_tolerance: float = 1e-12
    V: np.ndarray = field(init=False)
    W: np.ndarray = field(init=False)
    last_residual: np.ndarray | None = field(default=None, init=False)
    last_output: np.ndarray | None = field(default=None, init=False)

    def __post_init__(self):
        limit = self.dimension if self.capacity is None else min(self.capacity, self.dimension)
        self.limit = max(int(limit), 1)
        self.clear()

    def clear(self):
        self.V = np.zeros((self.dimension, 0))
        self.W = np.zeros((self.dimension, 0))
        self.last_residual = None
        self.last_output = None

    @property
    def columns(self):
        return self.V.shape[1]

    def record(self, residual, output):
        """Store the newest iterate; adds a difference column once a previous one exists."""
        residual = np.asarray(residual, dtype=np.float64)
        output = np.asarray(output, dtype=np.float64)
        if self.last_residual is not None:
            self.V = np.column_stack([residual - self.last_residual, self.V])
            self.W = np.column_stack([output - self.last_output, self.W])
        self.last_residual = residual.copy()
        self.last_output = output.copy()
        self.V = self.V[:, : self.limit]
        self.W = self.W[:, : self.limit]
        self._filter()

    def _filter(self):
        """Drop columns that are (nearly) linearly dependent on newer ones."""
        while self.columns > 0:
            Q, R = np.linalg.qr(self.V, mode="reduced")
            d = np.abs(np.diag(R))
            scale = max(np.linalg.norm(self.V[:, 0]), np.finfo(float).tiny)
            bad = np.flatnonzero(d < self.filter_tolerance * scale)
            if bad.size == 0:
                return
            keep = np.ones(self.columns, dtype=bool)
            keep[bad[0]] = False
            self.V, self.W = self.V[:, keep], self.W[:, keep]


def iqn_ils_update(history: IQNILSHistory, v_k, R_k, v_tilde):
    """Quasi-Newton step from the stored residual/output differences.

    ``alpha`` solves ``min |V alpha + R_k|``; the new iterate is
    ``v_tilde + W alpha``, i.e. ``v_k + R_k + W alpha``.
    """
    v_k = np.asarray(v_k, dtype=np.float64)
    R_k = np.asarray(R_k, dtype=np.float64)
    history.record(R_k, v_tilde)
    if history.columns == 0:
        raise ValueError("IQN-ILS needs at least one stored difference; use a relaxation step first")
    Q, R = np.linalg.qr(history.V, mode="reduced")
    alpha = scipy.linalg.solve_triangular(R, -Q.T @ R_k)
    return v_k + R_k + history.W @ alpha


# ---------------------------------------------------------------------------
# participants


class FreeFlowParticipant:
    """Free-flow solver ``v_gamma -> p_gamma`` for one fixed matrix."""

    def __init__(self, grid: StaggeredGrid, cfg: ScenarioConfig, solver="direct", inner_rtol=1e-10,
                 stepper=None):
        self.grid, self.cfg = grid, cfg
        self.stepper = StokesStepper(grid, cfg) if stepper is None else stepper
        self.solver = solver
        self.inner_rtol = inner_rtol
        self.inner_iterations = 0
        self.last_solution = None
        self.setup()

    def setup(self):
        """(Re)build the factorization or preconditioner."""
        start = time.perf_counter()
        A = as_csr(self.stepper.matrix)
        if self.solver == "direct":
            self.lu = lu_factor(A)
            self.storage = self.lu.fill_stats.nnz_factors
        else:
            nv = self.stepper.n_velocity
            V, B, C = A[:nv, :nv], A[:nv, nv:], A[nv:, :nv]
            mode = "exact" if self.solver == "uzawa_e" else "inexact"
            self.precond = Uzawa(V, B, C, UzawaConfig(mode=mode))
            self.ctrl = RestartController()
            self.storage = self.precond.storage + (2 * self.ctrl.m_max + 2) * A.shape[0]
        self.setup_time = time.perf_counter() - start

    def solve(self, v_gamma, v_prev, t):
        b = self.stepper.rhs(v_prev, t, v_gamma)
        if self.solver == "direct":
            x = lu_solve(self.lu, b)
        else:
            tol = self.inner_rtol * np.linalg.norm(b)
            x, rep = pd_gmres(self.stepper.matrix, self.precond, b, tol, max_restarts=1000,
                              ctrl=self.ctrl, x0=self.last_solution)
            self.inner_iterations += rep.iterations
            if not rep.converged:
                raise CouplingError(f"free-flow PD-GMRES did not converge: {rep.message}")
        self.last_solution = x
        p_gamma = self.stepper.interface_pressure(x, v_gamma, v_prev, t)
        return x, p_gamma


class PorousParticipant:
    """Porous-medium solver ``p_gamma -> v_gamma`` for one fixed matrix."""

    def __init__(self, grid: StaggeredGrid, cfg: ScenarioConfig, solver="direct", inner_rtol=1e-10,
                 stepper=None):
        self.grid, self.cfg = grid, cfg
        self.stepper = DarcyStepper(grid, cfg) if stepper is None else stepper
        self.solver = solver
        self.inner_rtol = inner_rtol
        self.inner_iterations = 0
        self.last_solution = None
        self.setup()

    def setup(self):
        start = time.perf_counter()
        if self.solver == "direct":
            self.lu = lu_factor(self.stepper.matrix)
            self.storage = self.lu.fill_stats.nnz_factors
        else:
            self.precond = AMG(self.stepper.matrix)
            # Bi-CGSTAB keeps eight work vectors
            self.storage = self.precond.storage + 8 * self.stepper.matrix.shape[0]
        self.setup_time = time.perf_counter() - start

    def solve(self, p_gamma):
        b = self.stepper.rhs(p_gamma)
        if self.solver == "direct":
            p = lu_solve(self.lu, b)
        else:
            tol = self.inner_rtol * np.linalg.norm(b)
            p, rep = bicgstab(self.stepper.matrix, self.precond, b, tol, max_iters=2000,
                              x0=self.last_solution)
            self.inner_iterations += rep.iterations
            if not rep.converged:
                raise CouplingError(f"porous Bi-CGSTAB did not converge: {rep.message}")
        self.last_solution = p
        return p, self.stepper.interface_velocity(p, p_gamma)


def solve_ff(v_pm_gamma, v_prev, cfg: ScenarioConfig, t=None, participant=None):
    """Free-flow solve with prescribed interface velocity; returns ``(x_ff, p_gamma)``
    with ``x_ff`` in the monolithic free-flow layout."""
    t = cfg.t_end if t is None else t
    participant = FreeFlowParticipant(build_grid(cfg), cfg) if participant is None else participant
    x, p_gamma = participant.solve(v_pm_gamma, v_prev, t)
    return participant.stepper.to_monolithic(x, v_pm_gamma), p_gamma


def solve_pm(p_ff_gamma, cfg: ScenarioConfig, participant=None):
    """Porous solve with prescribed interface pressure; returns ``(p_pm, v_gamma)``."""
    participant = PorousParticipant(build_grid(cfg), cfg) if participant is None else participant
    return participant.solve(p_ff_gamma)


# ---------------------------------------------------------------------------
# coupling loop


@dataclass
class CouplingStepLog:
    time_step: int
    t: float
    iterations: int
    converged: bool
    pressure_measure: float
    velocity_measure: float
    residual_history: list


class CoupledProblem:
    """Both participants plus the coupling state for a transient run."""

    def __init__(self, cfg: ScenarioConfig, ccfg: CouplingConfig | None = None, steppers=None):
        self.cfg = cfg
        self.ccfg = CouplingConfig() if ccfg is None else ccfg
        self.grid = build_grid(cfg)
        ff_stepper, pm_stepper = (None, None) if steppers is None else steppers
        self.ff = FreeFlowParticipant(self.grid, cfg, self.ccfg.stokes_solver, self.ccfg.inner_rtol,
                                      stepper=ff_stepper)
        self.pm = PorousParticipant(self.grid, cfg, self.ccfg.darcy_solver, self.ccfg.inner_rtol,
                                    stepper=pm_stepper)
        self.history = IQNILSHistory(self.grid.n_interface, self.ccfg.capacity, self.ccfg.filter_tolerance)
        self.v_gamma = np.zeros(self.grid.n_interface)
        self.p_gamma = np.zeros(self.grid.n_interface)
        self.log: list[CouplingStepLog] = []

    @property
    def setup_time(self):
        return self.ff.setup_time + self.pm.setup_time

    @property
    def storage(self):
        """Analytic count of stored floats: solver data plus the IQN-ILS history."""
        return self.ff.storage + self.pm.storage + 2 * self.history.limit * self.grid.n_interface

    def setup_solvers(self):
        self.ff.setup()
        self.pm.setup()

    def fixed_point_residual(self, v, v_prev=None, t=None):
        """``S_pm(S_ff(v)) - v``."""
        t = self.cfg.t_end if t is None else t
        _, p = self.ff.solve(v, v_prev, t)
        _, v_new = self.pm.solve(p)
        return v_new - v

    def _measure(self, new, old):
        """Relative change ``|new - old| / |new|``; absolute when ``|new|`` is negligible."""
        diff = np.linalg.norm(new - old)
        norm = np.linalg.norm(new)
        guard = self.ccfg.zero_guard
        if norm < guard:
            return diff / guard
        return diff / norm

    def timestep(self, v_prev, t, step=0):
        """Iterate one time step to convergence.  Returns ``(solution, iterations)``."""
        c = self.ccfg
        g = self.grid
        self.history.clear()
        v = self.v_gamma.copy()
        p_old = self.p_gamma.copy()
        residuals = []
        converged = False
        m_p = m_v = np.inf
        k = 0
        for k in range(1, c.max_coupling_iterations + 1):
            x_ff, p_new = self.ff.solve(v, v_prev, t)
            p_pm, v_tilde = self.pm.solve(p_new)
            R = v_tilde - v
            residuals.append(float(np.linalg.norm(R)))
            m_p = self._measure(p_new, p_old)
            m_v = self._measure(v_tilde, v)
            if m_p < c.epsilon and m_v < c.epsilon:
                converged = True
                v_final = v
                break
            if k == 1:
                self.history.record(R, v_tilde)
                v_next = v + c.omega0 * R
            elif c.acceleration == "iqn_ils":
                v_next = iqn_ils_update(self.history, v, R, v_tilde)
            else:
                v_next = v_tilde
            v, p_old = v_next, p_new
        if not converged:
            v_final = v
        self.v_gamma = v_final.copy()
        self.p_gamma = p_new.copy()
        solution = np.concatenate([self.ff.stepper.to_monolithic(x_ff, v_final), p_pm])
        entry = CouplingStepLog(step, t, k, converged, m_p, m_v, residuals)
        self.log.append(entry)
        if not converged:
            msg = f"coupling did not converge in {c.max_coupling_iterations} iterations at t={t:g}"
            logger.warning(msg)
            if c.raise_on_failure:
                raise CouplingError(msg, log=entry)
        assert solution.shape[0] == g.n_dof
        return solution, k

    def run(self, n_steps=None):
        """Backward Euler loop from rest.  Returns the list of per-step solutions."""
        cfg, g = self.cfg, self.grid
        n_steps = cfg.n_steps if n_steps is None else n_steps
        v_prev = np.zeros(g.n_velocity)
        out = []
        for step in range(1, n_steps + 1):
            x, _ = self.timestep(v_prev, step * cfg.dt, step)
            v_prev = x[: g.n_velocity]
            out.append(x)
        return out


def fixed_point_residual(v, cfg: ScenarioConfig, v_prev=None, t=None, problem=None):
    problem = CoupledProblem(cfg) if problem is None else problem
    return problem.fixed_point_residual(v, v_prev, t)


def coupled_timestep(v_prev, t, cfg: ScenarioConfig, coupling_cfg: CouplingConfig | None = None,
                     problem=None, initial_trace=None):
    """One coupled time step; returns ``(full solution, coupling iterations)``."""
    problem = CoupledProblem(cfg, coupling_cfg) if problem is None else problem
    if initial_trace is not None:
        problem.v_gamma = np.asarray(initial_trace.v_pm_gamma, dtype=np.float64).copy()
        problem.p_gamma = np.asarray(initial_trace.p_ff_gamma, dtype=np.float64).copy()
    return problem.timestep(v_prev, t)


LOG_FIELDS = ("time_step", "t", "iterations", "converged", "pressure_measure", "velocity_measure")


def write_coupling_log(path, log, append=False):
    """One CSV row per time step: iteration count and both convergence measures."""
    path = Path(path)
    exists = path.exists() and path.stat().st_size > 0
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not (append and exists):
            w.writerow(LOG_FIELDS)
        for e in log:
            w.writerow([e.time_step, repr(float(e.t)), e.iterations, int(e.converged),
                        repr(float(e.pressure_measure)), repr(float(e.velocity_measure))])
