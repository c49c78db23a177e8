"""Finite volume discretization of the coupled Stokes-Darcy model problem.

Geometry: the porous square ``[0, 1] x [0, 1]`` sits below the free-flow
channel ``[0, 1] x [1, 4]``; the interface is the segment ``y = 1``.  Both
domains use square cells of size ``h = 1 / n``.

Free flow uses a MAC grid: pressure at cell centres, ``u`` on vertical faces,
``v`` on horizontal faces.  The momentum balance is the transient Stokes
equation multiplied by the density, so momentum rows carry force per unit
depth, pressure enters with the face length ``h`` and the viscous stress is
``mu * (grad v + grad v^T)``.  Continuity rows are ``-h * div v`` so that the
divergence block is the transpose of the gradient block.

The porous medium uses cell-centred TPFA with mobility ``K / mu``.  Rows are
net outward volume fluxes per unit depth.

Global unknown ordering of the monolithic system (one contiguous range per
block): ``[u faces | v faces | free-flow pressure | porous pressure]``.
Velocity faces on the top wall are eliminated; the interface faces
``v(i, 0)`` are unknowns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sparse import CooBuilder, SparseMatrix

SOLVER_CHOICES = (
    "umfpack",
    "precice_umfpack",
    "precice_uzawa_e_amg",
    "precice_uzawa_amg",
    "pv_bj_amg_amg",
    "pv_bgs_amg_amg",
    "td_bj_uzawa_amg",
    "td_bgs_uzawa_amg",
    "td_bj_uzawa_ilu0",
    "td_bgs_uzawa_ilu0",
)


@dataclass(frozen=True)
class ScenarioConfig:
    cells_per_unit_square: int = 16
    permeability: float = 1e-6
    alpha_bj: float = 1.0
    kinematic_viscosity: float = 1e-6
    density: float = 1e3
    dt: float = 2e5
    t_end: float = 5e6
    dp_max: float = 1e-9
    solver: str = "umfpack"

    def __post_init__(self):
        if self.cells_per_unit_square < 2:
            raise ValueError("cells_per_unit_square must be at least 2")
        for name in ("permeability", "kinematic_viscosity", "density", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha_bj <= 0:
            raise ValueError("alpha_bj must be positive")
        if math.isfinite(self.dt):
            steps = self.t_end / self.dt
            if self.t_end < 0 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ValueError("t_end must be a nonnegative integer multiple of dt")
        if self.solver not in SOLVER_CHOICES:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVER_CHOICES}")

    @property
    def viscosity(self):
        """Dynamic viscosity ``mu = nu * rho``."""
        return self.kinematic_viscosity * self.density

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    def inflow_pressure(self, t):
        """Half cosine ramp from 0 at ``t = 0`` to ``dp_max`` at ``t_end``."""
        if self.t_end == 0:
            return self.dp_max
        return self.dp_max * 0.5 * (1.0 - math.cos(math.pi * t / self.t_end))


def read_key_values(path):
    """Parse a ``key = value`` file (``#`` starts a comment) into ``(lineno, key, value)`` triples."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":"
        if sep not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        out.append((lineno, key, value))
    return out


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario file; keys are the :class:`ScenarioConfig` field names."""
    kinds = {f.name: f.type for f in fields(ScenarioConfig)}
    values = {}
    for lineno, key, value in read_key_values(path):
        if key not in kinds:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kind = kinds[key]
        if kind == "int":
            values[key] = int(value)
        elif kind == "float":
            values[key] = float(value)
        else:
            values[key] = value
    return ScenarioConfig(**values)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


@dataclass(frozen=True)
class StaggeredGrid:
    """Matching uniform grids for the free-flow channel and the porous square."""

    n: int

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def ff_shape(self):
        return self.n, 3 * self.n

    @property
    def pm_shape(self):
        return self.n, self.n

    # block sizes of the monolithic layout
    @property
    def n_u(self):
        return (self.n + 1) * 3 * self.n

    @property
    def n_v(self):
        return self.n * 3 * self.n

    @property
    def n_velocity(self):
        return self.n_u + self.n_v

    @property
    def n_p_ff(self):
        return 3 * self.n * self.n

    @property
    def n_p_pm(self):
        return self.n * self.n

    @property
    def n_ff(self):
        return self.n_velocity + self.n_p_ff

    @property
    def n_dof(self):
        return self.n_ff + self.n_p_pm

    @property
    def n_interface(self):
        return self.n

    def u_index(self, i, j):
        return j * (self.n + 1) + i

    def v_index(self, i, k):
        return self.n_u + k * self.n + i

    def p_ff_index(self, i, j):
        return self.n_velocity + j * self.n + i

    def p_pm_index(self, i, j):
        """Global index of porous cell ``(i, j)``; ``j = n - 1`` touches the interface."""
        return self.n_ff + j * self.n + i

    @property
    def interface_faces(self):
        """Global indices of the free-flow interface faces ``v(i, 0)``, left to right."""
        return np.array([self.v_index(i, 0) for i in range(self.n)])

    @property
    def interface_cells(self):
        """Porous-medium cells below the interface faces (local Darcy numbering)."""
        return np.array([(self.n - 1) * self.n + i for i in range(self.n)])

    @property
    def velocity_slice(self):
        return slice(0, self.n_velocity)

    @property
    def p_ff_slice(self):
        return slice(self.n_velocity, self.n_ff)

    @property
    def ff_slice(self):
        return slice(0, self.n_ff)

    @property
    def pm_slice(self):
        return slice(self.n_ff, self.n_dof)

    def face_centres(self):
        """Coordinates of ``u`` and ``v`` unknowns in monolithic order."""
        n, h = self.n, self.h
        j, i = np.divmod(np.arange(self.n_u), n + 1)
        u_xy = np.column_stack([i * h, 1.0 + (j + 0.5) * h])
        k, i = np.divmod(np.arange(self.n_v), n)
        v_xy = np.column_stack([(i + 0.5) * h, 1.0 + k * h])
        return u_xy, v_xy

    def cell_centres_pm(self):
        j, i = np.divmod(np.arange(self.n_p_pm), self.n)
        return np.column_stack([(i + 0.5) * self.h, (j + 0.5) * self.h])

    def cell_centres_ff(self):
        j, i = np.divmod(np.arange(self.n_p_ff), self.n)
        return np.column_stack([(i + 0.5) * self.h, 1.0 + (j + 0.5) * self.h])


def build_grid(cfg: ScenarioConfig) -> StaggeredGrid:
    return StaggeredGrid(cfg.cells_per_unit_square)


# ---------------------------------------------------------------------------
# MAC assembly on a single rectangle


def _axpy(target, expr, scale):
    """``target += scale * expr`` for ``(dict, const)`` linear expressions."""
    coefs, const = expr
    for j, c in coefs.items():
        target[0][j] = target[0].get(j, 0.0) + scale * c
    target[1] += scale * const


class _MacBox:
    """Row builder for Stokes on an ``nx x ny`` MAC box with spacing ``h``.

    Full unknown vector ordering: ``u`` faces ``(nx+1)*ny``, then ``v`` faces
    ``nx*(ny+1)``, then cell pressures ``nx*ny``.

    Side conditions:
      left/right: ``("pressure", p)`` traction with zero tangential velocity,
        or ``("velocity", normal, tangential)``.
      top: ``("velocity", normal, tangential)``.
      bottom: ``("velocity", normal, tangential)`` or
        ``("bjs", normal)`` where ``normal`` is an array of prescribed
        normal velocities or ``None`` for free interface unknowns.
    """

    def __init__(self, nx, ny, h, mu, rho, inv_dt, left, right, top, bottom, bjs_coefficient=0.0):
        self.nx, self.ny, self.h = nx, ny, h
        self.mu, self.rho, self.inv_dt = mu, rho, inv_dt
        self.left, self.right, self.top, self.bottom = left, right, top, bottom
        self.c_bjs = bjs_coefficient
        self.n_u = (nx + 1) * ny
        self.n_v = nx * (ny + 1)
        self.n_p = nx * ny
        self.n_full = self.n_u + self.n_v + self.n_p

    def u(self, i, j):
        return j * (self.nx + 1) + i

    def v(self, i, k):
        return self.n_u + k * self.nx + i

    def p(self, i, j):
        return self.n_u + self.n_v + j * self.nx + i

    def fixed_values(self):
        """Map of eliminated face index -> prescribed velocity."""
        nx, ny = self.nx, self.ny
        fixed = {}
        if self.left[0] == "velocity":
            for j in range(ny):
                fixed[self.u(0, j)] = self.left[1]
        if self.right[0] == "velocity":
            for j in range(ny):
                fixed[self.u(nx, j)] = self.right[1]
        for i in range(nx):
            fixed[self.v(i, ny)] = self.top[1]
        if self.bottom[0] == "velocity":
            for i in range(nx):
                fixed[self.v(i, 0)] = self.bottom[1]
        elif self.bottom[1] is not None:
            for i in range(nx):
                fixed[self.v(i, 0)] = float(self.bottom[1][i])
        return fixed

    def _tangential(self, side):
        kind = side[0]
        return 0.0 if kind == "pressure" else side[2]

    def sxx(self, i, j):
        mu, h = self.mu, self.h
        return {self.u(i + 1, j): -2 * mu / h, self.u(i, j): 2 * mu / h, self.p(i, j): 1.0}, 0.0

    def syy(self, i, j):
        mu, h = self.mu, self.h
        return {self.v(i, j + 1): -2 * mu / h, self.v(i, j): 2 * mu / h, self.p(i, j): 1.0}, 0.0

    def dvdx(self, i, k):
        h, nx = self.h, self.nx
        if 0 < i < nx:
            return {self.v(i, k): 1 / h, self.v(i - 1, k): -1 / h}, 0.0
        if i == 0:
            return {self.v(0, k): 2 / h}, -2 / h * self._tangential(self.left)
        return {self.v(nx - 1, k): -2 / h}, 2 / h * self._tangential(self.right)

    def sxy(self, i, k):
        """Shear stress ``-mu (du/dy + dv/dx)`` at vertex ``(i, k)``."""
        mu, h, ny = self.mu, self.h, self.ny
        out = [{}, 0.0]
        if self.bottom[0] == "bjs" and k == 0:
            # slip velocity eliminated from u_s = c (du/dy + dv/dx), du/dy one-sided
            scale = -mu / (1.0 + 2.0 * self.c_bjs / h)
            _axpy(out, ({self.u(i, 0): 2 / h}, 0.0), scale)
            _axpy(out, self.dvdx(i, 0), scale)
            return out[0], out[1]
        if 0 < k < ny:
            dudy = {self.u(i, k): 1 / h, self.u(i, k - 1): -1 / h}, 0.0
        elif k == ny:
            dudy = {self.u(i, ny - 1): -2 / h}, 2 / h * self.top[2]
        else:
            dudy = {self.u(i, 0): 2 / h}, -2 / h * self.bottom[2]
        _axpy(out, dudy, -mu)
        _axpy(out, self.dvdx(i, k), -mu)
        return out[0], out[1]

    def x_momentum(self, i, j, u_prev):
        h, nx = self.h, self.nx
        w = h if 0 < i < nx else 0.5 * h
        row = [{}, 0.0]
        mass = self.rho * w * h * self.inv_dt
        if mass:
            row[0][self.u(i, j)] = mass
            row[1] -= mass * u_prev
        east = self.sxx(i, j) if i < nx else ({}, self.right[1])
        west = self.sxx(i - 1, j) if i > 0 else ({}, self.left[1])
        _axpy(row, east, h)
        _axpy(row, west, -h)
        _axpy(row, self.sxy(i, j + 1), w)
        _axpy(row, self.sxy(i, j), -w)
        return row

    def y_momentum(self, i, k, v_prev):
        """Interior rows are full balances; ``k == 0`` gives the interface
        half-cell balance without its bottom traction term."""
        h = self.h
        w = h if k > 0 else 0.5 * h
        row = [{}, 0.0]
        mass = self.rho * w * h * self.inv_dt
        if mass:
            row[0][self.v(i, k)] = mass
            row[1] -= mass * v_prev
        _axpy(row, self.syy(i, k), h)
        if k > 0:
            _axpy(row, self.syy(i, k - 1), -h)
        _axpy(row, self.sxy(i + 1, k), w)
        _axpy(row, self.sxy(i, k), -w)
        return row

    def continuity(self, i, j):
        h = self.h
        return [{self.u(i + 1, j): -h, self.u(i, j): h, self.v(i, j + 1): -h, self.v(i, j): h}, 0.0]

    def assemble(self, prev_full=None, pin_pressure=False):
        """Return ``(A_full_rows, rhs, free, fixed, stress_rows, stress_rhs)``.

        ``A_full_rows`` has one row per free unknown in full column numbering;
        the interface stress rows are the bottom half-cell balances (only for
        ``bjs`` bottoms) with the traction term left out.
        """
        nx, ny = self.nx, self.ny
        if prev_full is None:
            prev_full = np.zeros(self.n_full)
        fixed = self.fixed_values()
        free = np.array([k for k in range(self.n_full) if k not in fixed], dtype=np.int64)
        rows = []
        for j in range(ny):
            for i in range(nx + 1):
                if self.u(i, j) not in fixed:
                    rows.append(self.x_momentum(i, j, prev_full[self.u(i, j)]))
        for k in range(ny + 1):
            for i in range(nx):
                if self.v(i, k) not in fixed:
                    rows.append(self.y_momentum(i, k, prev_full[self.v(i, k)]))
        for j in range(ny):
            for i in range(nx):
                if pin_pressure and i == 0 and j == 0:
                    rows.append([{self.p(0, 0): self.h}, 0.0])
                else:
                    rows.append(self.continuity(i, j))
        stress = []
        if self.bottom[0] == "bjs":
            stress = [self.y_momentum(i, 0, prev_full[self.v(i, 0)]) for i in range(nx)]
        return rows, free, fixed, stress


def _rows_to_csr(rows, n_cols):
    """Rows of ``({col: coef}, const)`` to ``(csr, const)``; each row means
    ``sum coef * x[col] + const``."""
    b = CooBuilder(len(rows), n_cols)
    const = np.zeros(len(rows))
    for r, (coefs, c) in enumerate(rows):
        b.add_row(r, coefs)
        const[r] = c
    return b.tocsr(), const


@dataclass
class SubdomainSystem:
    """A linear system over a subset ``free`` of a larger unknown vector.

    ``matrix @ x[free] = rhs`` with the remaining entries fixed to
    ``fixed_values``.
    """

    matrix: SparseMatrix
    rhs: np.ndarray
    free: np.ndarray
    n_full: int
    fixed_index: np.ndarray
    fixed_values: np.ndarray
    n_velocity: int = 0
    extra: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.matrix
        yield self.rhs

    def expand(self, x_free):
        x = np.zeros(self.n_full)
        x[self.free] = x_free
        x[self.fixed_index] = self.fixed_values
        return x


def _eliminate(rows, free, fixed, n_full):
    A_full, const = _rows_to_csr(rows, n_full)
    fixed_index = np.array(sorted(fixed), dtype=np.int64)
    fixed_values = np.array([fixed[k] for k in fixed_index], dtype=np.float64)
    A = A_full[:, free].tocsr()
    rhs = -const
    if fixed_index.size:
        rhs = rhs - A_full[:, fixed_index] @ fixed_values
    A.sort_indices()
    return A, rhs, fixed_index, fixed_values


def assemble_mac(nx, ny, h, mu, rho, inv_dt, left, right, top, bottom, bjs_coefficient=0.0,
                 prev_full=None, pin_pressure=False) -> SubdomainSystem:
    """Stokes system on a single MAC box (see :class:`_MacBox` for the side conditions)."""
    box = _MacBox(nx, ny, h, mu, rho, inv_dt, left, right, top, bottom, bjs_coefficient)
    rows, free, fixed, stress = box.assemble(prev_full, pin_pressure=pin_pressure)
    A, rhs, fixed_index, fixed_values = _eliminate(rows, free, fixed, box.n_full)
    n_velocity = int(np.count_nonzero(free < box.n_u + box.n_v))
    extra = {"box": box, "full_matrix": _rows_to_csr(rows, box.n_full)[0]}
    if stress:
        S, s_const = _rows_to_csr(stress, box.n_full)
        extra["stress"] = (S, s_const)
    return SubdomainSystem(A, rhs, free, box.n_full, fixed_index, fixed_values, n_velocity, extra)


def _ff_box(grid, cfg, v_gamma, inv_dt, t):
    n = grid.n
    p_in = cfg.inflow_pressure(t)
    return dict(
        nx=n, ny=3 * n, h=grid.h, mu=cfg.viscosity, rho=cfg.density, inv_dt=inv_dt,
        left=("pressure", p_in), right=("pressure", 0.0), top=("velocity", 0.0, 0.0),
        bottom=("bjs", v_gamma) if v_gamma is not False else ("velocity", 0.0, 0.0),
        bjs_coefficient=math.sqrt(cfg.permeability) / cfg.alpha_bj,
    )


def _inv_dt(cfg, stationary):
    if stationary or not math.isfinite(cfg.dt):
        return 0.0
    return 1.0 / cfg.dt


def _ff_full_from_velocity(grid, v_prev):
    """Scatter a monolithic-layout velocity vector into the box numbering."""
    n = grid.n
    full = np.zeros((n + 1) * 3 * n + n * (3 * n + 1) + 3 * n * n)
    if v_prev is None:
        return full
    v_prev = np.asarray(v_prev, dtype=np.float64)
    if v_prev.shape[0] != grid.n_velocity:
        raise ValueError(f"v_prev must have length {grid.n_velocity}, got {v_prev.shape[0]}")
    # the box numbering coincides with the monolithic one for u and v(k < 3n)
    full[:grid.n_velocity] = v_prev
    return full


def assemble_stokes(grid: StaggeredGrid, cfg: ScenarioConfig, v_prev=None, interface_bc=None, t=None,
                    stationary=False) -> SubdomainSystem:
    """Free-flow system ``[[V, B], [C, 0]]`` for one backward Euler step.

    ``interface_bc`` is ``None`` for an impermeable no-slip bottom, or an
    array of prescribed normal interface velocities (Beavers-Joseph-Saffman
    slip for the tangential component).  ``t`` defaults to ``t_end``.
    ``v_prev`` is in the monolithic velocity layout.
    """
    t = cfg.t_end if t is None else t
    v_gamma = False if interface_bc is None else np.asarray(interface_bc, dtype=np.float64)
    if v_gamma is not False and v_gamma.shape[0] != grid.n_interface:
        raise ValueError("interface_bc must have one value per interface face")
    spec = _ff_box(grid, cfg, v_gamma, _inv_dt(cfg, stationary), t)
    return assemble_mac(**spec, prev_full=_ff_full_from_velocity(grid, v_prev))


# ---------------------------------------------------------------------------
# TPFA


def assemble_tpfa(nx, ny, h, mobility, left=None, right=None, bottom=None, top=None) -> tuple:
    """Cell-centred TPFA for ``-div(mobility grad p) = 0``; rows are net outflow.

    Each side is ``None`` (no flow) or an array/scalar of Dirichlet pressures
    imposed at the face centres through a half-cell transmissibility.
    """
    b = CooBuilder(nx * ny, nx * ny)
    rhs = np.zeros(nx * ny)
    t_full = mobility  # face length h over centre distance h
    t_half = 2.0 * mobility

    def cell(i, j):
        return j * nx + i

    for j in range(ny):
        for i in range(nx):
            c = cell(i, j)
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < nx and 0 <= jj < ny:
                    b.add(c, c, t_full)
                    b.add(c, cell(ii, jj), -t_full)
                    continue
                if ii < 0:
                    bc, pos = left, j
                elif ii >= nx:
                    bc, pos = right, j
                elif jj < 0:
                    bc, pos = bottom, i
                else:
                    bc, pos = top, i
                if bc is None:
                    continue
                value = bc if np.ndim(bc) == 0 else bc[pos]
                b.add(c, c, t_half)
                rhs[c] += t_half * value
    A = b.tocsr()
    return A, rhs


def assemble_darcy(grid: StaggeredGrid, cfg: ScenarioConfig, interface_bc=None, **sides):
    """Porous-medium block ``D'`` and its right-hand side.

    ``interface_bc`` is ``None`` (interface handled by the coupling blocks,
    so the top side is closed here) or an array of Dirichlet interface
    pressures.  Extra ``left/right/bottom/top`` keywords override the default
    no-flow sides.
    """
    n = grid.n
    mobility = cfg.permeability / cfg.viscosity
    bcs = {"left": None, "right": None, "bottom": None, "top": None}
    if interface_bc is not None:
        bcs["top"] = np.asarray(interface_bc, dtype=np.float64)
    bcs.update(sides)
    return assemble_tpfa(n, n, grid.h, mobility, **bcs)


def darcy_interface_velocity(grid, cfg, p_pm, p_gamma):
    """Upward normal velocity through each interface face for Dirichlet interface pressures."""
    mobility = cfg.permeability / cfg.viscosity
    p_top = np.asarray(p_pm)[grid.interface_cells]
    return 2.0 * mobility * (p_top - np.asarray(p_gamma)) / grid.h


# ---------------------------------------------------------------------------
# monolithic system


@dataclass
class CoupledSystem:
    matrix: SparseMatrix
    rhs: np.ndarray
    grid: StaggeredGrid
    cfg: ScenarioConfig
    # interface normal-stress functional: h * p_gamma = stress @ x_ff + stress_const
    stress: SparseMatrix
    stress_const: np.ndarray

    @property
    def td_partition(self):
        g = self.grid
        return (slice(0, g.n_ff), slice(g.n_ff, g.n_dof))

    @property
    def pv_partition(self):
        g = self.grid
        return (slice(0, g.n_velocity), slice(g.n_velocity, g.n_ff), slice(g.n_ff, g.n_dof))

    def block(self, rows: slice, cols: slice) -> SparseMatrix:
        return self.matrix[rows, cols].tocsr()

    def blocks(self):
        """All named sub-blocks of both partitionings."""
        ff, pm = self.td_partition
        vel, pff, _ = self.pv_partition
        return {
            "A'": self.block(ff, ff), "B'": self.block(ff, pm),
            "C'": self.block(pm, ff), "D'": self.block(pm, pm),
            "V": self.block(vel, vel), "B": self.block(vel, pff), "C": self.block(pff, vel),
            "B1'": self.block(vel, pm), "C1'": self.block(pm, vel),
        }


def assemble_monolithic(grid: StaggeredGrid, cfg: ScenarioConfig, v_prev=None, t=None,
                        stationary=False) -> CoupledSystem:
    """Assemble the full coupled matrix for the step ending at time ``t``.

    Interface rows:
      * free-flow ``v(i, 0)``: half-cell normal momentum balance whose bottom
        traction is the porous interface pressure
        ``p_gamma = p_cell - mu h / (2 K) v(i, 0)`` (normal stress continuity),
      * porous top cells: outflow ``h * v(i, 0)`` through the interface
        (normal mass flux continuity),
      * tangential momentum at the interface via the BJS slip law.
    """
    t = cfg.t_end if t is None else t
    spec = _ff_box(grid, cfg, None, _inv_dt(cfg, stationary), t)
    ff = assemble_mac(**spec, prev_full=_ff_full_from_velocity(grid, v_prev))
    if ff.matrix.shape[0] != grid.n_ff:
        raise AssertionError("free-flow layout does not match the grid bookkeeping")
    S, s_const = ff.extra["stress"]
    stress = S[:, ff.free].tocsr()
    stress_rhs = s_const

    D, _ = assemble_darcy(grid, cfg)
    h, mu, K = grid.h, cfg.viscosity, cfg.permeability
    faces = grid.interface_faces
    cells = grid.n_ff + grid.interface_cells

    coupling = CooBuilder(grid.n_dof, grid.n_dof)
    for f, c in zip(faces, cells):
        coupling.add(f, c, -h)                        # B'_1
        coupling.add(f, f, mu * h * h / (2.0 * K))    # Darcy half-cell resistance
        coupling.add(c, f, h)                         # C'_1
    A = sp.bmat([[ff.matrix, None], [None, D]], format="csr") + coupling.tocsr()
    A.sort_indices()
    rhs = np.concatenate([ff.rhs, np.zeros(grid.n_p_pm)])
    return CoupledSystem(A, rhs, grid, cfg, stress, stress_rhs)


@dataclass(frozen=True)
class InterfaceState:
    p_ff_gamma: np.ndarray
    v_pm_gamma: np.ndarray
    k: int = 0

    def __post_init__(self):
        if np.shape(self.p_ff_gamma) != np.shape(self.v_pm_gamma):
            raise ValueError("interface traces must have equal length")


def extract_interface_traces(system: CoupledSystem, solution, k=0) -> InterfaceState:
    """Free-flow normal stress and porous normal velocity at every interface face.

    The pressure comes from the free-flow half-cell balance alone, the velocity
    from the porous cell balance alone; both agree with the coupling unknowns
    only when the coupled equations hold.
    """
    g = system.grid
    x = np.asarray(solution, dtype=np.float64)
    if x.shape[0] != g.n_dof:
        raise ValueError(f"solution must have length {g.n_dof}")
    p_gamma = (system.stress @ x[g.ff_slice] + system.stress_const) / g.h
    D = system.block(*(system.td_partition[1],) * 2)
    inner_outflow = (D @ x[g.pm_slice])[g.interface_cells]
    v_gamma = -inner_outflow / g.h
    return InterfaceState(p_gamma, v_gamma, k)


def boundary_fluxes(system: CoupledSystem, solution):
    """Discrete normal volume fluxes (per unit depth) through subdomain boundaries.

    Returns a dict with the free-flow inflow/outflow/interface fluxes and the
    porous interface flux; positive values leave the respective domain.
    """
    g = system.grid
    n, h = g.n, g.h
    x = np.asarray(solution)
    u_left = np.array([x[g.u_index(0, j)] for j in range(3 * n)])
    u_right = np.array([x[g.u_index(n, j)] for j in range(3 * n)])
    v_gamma = x[g.interface_faces]
    D = system.block(*(system.td_partition[1],) * 2)
    inner = (D @ x[g.pm_slice])[g.interface_cells]
    return {
        "ff_left": -h * u_left.sum(),
        "ff_right": h * u_right.sum(),
        "ff_interface": -h * v_gamma.sum(),
        "pm_interface": -inner.sum(),
        "ff_largest": h * max(np.abs(u_left).max(), np.abs(u_right).max(), np.abs(v_gamma).max()),
    }


def scenario_with(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    return replace(cfg, **changes)


# ---------------------------------------------------------------------------
# time stepping with a frozen matrix
#
# For a fixed dt the matrices do not change between time steps; only the
# right-hand sides do, and those are affine in the previous velocity, the
# inflow pressure and (for the free-flow subdomain) the interface velocity.
# The steppers assemble once and rebuild right-hand sides by linearity.


def _unit_inflow(cfg):
    return replace(cfg, dp_max=1.0), cfg.t_end


def _no_inflow(cfg):
    return replace(cfg, dp_max=0.0)


class MonolithicStepper:
    """Coupled systems for successive backward Euler steps."""

    def __init__(self, grid: StaggeredGrid, cfg: ScenarioConfig, stationary=False):
        self.grid, self.cfg = grid, cfg
        unit, t1 = _unit_inflow(cfg)
        base = assemble_monolithic(grid, unit, t=t1, stationary=stationary)
        ones = assemble_monolithic(grid, _no_inflow(cfg), v_prev=np.ones(grid.n_velocity),
                                   stationary=stationary)
        self.matrix = base.matrix
        self.stress = base.stress
        self._rhs_inflow = base.rhs
        self._stress_inflow = base.stress_const
        self._mass = ones.rhs[: grid.n_velocity]
        self._stress_mass = ones.stress_const

    def system(self, v_prev=None, t=None) -> CoupledSystem:
        g, cfg = self.grid, self.cfg
        t = cfg.t_end if t is None else t
        p_in = cfg.inflow_pressure(t)
        rhs = p_in * self._rhs_inflow
        stress_const = p_in * self._stress_inflow
        if v_prev is not None:
            v_prev = np.asarray(v_prev, dtype=np.float64)
            rhs = rhs.copy()
            rhs[: g.n_velocity] += self._mass * v_prev
            stress_const = stress_const + self._stress_mass * v_prev[g.interface_faces]
        return CoupledSystem(self.matrix, rhs, g, cfg, self.stress, stress_const)


class StokesStepper:
    """Free-flow subdomain with prescribed interface normal velocity.

    ``rhs(v_prev, t, v_gamma)`` and ``interface_pressure(x_free, ...)`` reuse
    one assembled matrix.  Vectors ``x_free`` are in the subdomain numbering;
    :meth:`to_monolithic` maps them to the free-flow part of the coupled vector.
    """

    def __init__(self, grid: StaggeredGrid, cfg: ScenarioConfig, stationary=False):
        self.grid, self.cfg = grid, cfg
        zero = np.zeros(grid.n_interface)
        unit, t1 = _unit_inflow(cfg)
        base = assemble_stokes(grid, unit, interface_bc=zero, t=t1, stationary=stationary)
        ones = assemble_stokes(grid, _no_inflow(cfg), v_prev=np.ones(grid.n_velocity),
                               interface_bc=zero, stationary=stationary)
        self.subsystem = base
        self.matrix = base.matrix
        self.free = base.free
        self.n_velocity = base.n_velocity
        full = base.extra["full_matrix"]
        self._coupling = -full[:, grid.interface_faces].tocsr()
        self._rhs_inflow = base.rhs
        self._mass = ones.rhs
        self._velocity_rows = base.free[base.free < grid.n_velocity]
        S, s1 = base.extra["stress"]
        self._stress = S
        self._stress_inflow = s1
        self._stress_mass = ones.extra["stress"][1]
        self._fixed_index = base.fixed_index
        self._base_fixed = base.fixed_values.copy()
        self._face_slots = np.searchsorted(base.fixed_index, grid.interface_faces)
        self._mono = np.r_[0:grid.n_velocity, grid.n_velocity + grid.n:base.n_full]

    def rhs(self, v_prev, t, v_gamma):
        p_in = self.cfg.inflow_pressure(t)
        r = p_in * self._rhs_inflow + self._coupling @ np.asarray(v_gamma, dtype=np.float64)
        if v_prev is not None:
            # the time term is diagonal: rows of free velocities see their own v_prev
            n_free_vel = self._velocity_rows.shape[0]
            r[:n_free_vel] += self._mass[:n_free_vel] * np.asarray(v_prev)[self._velocity_rows]
        return r

    def full_vector(self, x_free, v_gamma):
        x = np.zeros(self.subsystem.n_full)
        x[self.free] = x_free
        fixed = self._base_fixed.copy()
        fixed[self._face_slots] = v_gamma
        x[self._fixed_index] = fixed
        return x

    def interface_pressure(self, x_free, v_gamma, v_prev, t):
        """Normal-stress pressure ``p_gamma`` on every interface face."""
        p_in = self.cfg.inflow_pressure(t)
        const = p_in * self._stress_inflow
        if v_prev is not None:
            const = const + self._stress_mass * np.asarray(v_prev)[self.grid.interface_faces]
        return (self._stress @ self.full_vector(x_free, v_gamma) + const) / self.grid.h

    def to_monolithic(self, x_free, v_gamma):
        return self.full_vector(x_free, v_gamma)[self._mono]


class DarcyStepper:
    """Porous subdomain with prescribed interface pressure."""

    def __init__(self, grid: StaggeredGrid, cfg: ScenarioConfig):
        self.grid, self.cfg = grid, cfg
        self.matrix, _ = assemble_darcy(grid, cfg, interface_bc=np.zeros(grid.n_interface))
        self.mobility = cfg.permeability / cfg.viscosity

    def rhs(self, p_gamma):
        r = np.zeros(self.grid.n_p_pm)
        r[self.grid.interface_cells] = 2.0 * self.mobility * np.asarray(p_gamma, dtype=np.float64)
        return r

    def interface_velocity(self, p_pm, p_gamma):
        return darcy_interface_velocity(self.grid, self.cfg, p_pm, p_gamma)
