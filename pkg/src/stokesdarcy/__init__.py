"""Coupled Stokes-Darcy solvers: direct, block-preconditioned Krylov and partitioned."""

from .coupling import CoupledProblem, CouplingConfig, coupled_timestep
from .discretize import (
    CoupledSystem,
    MonolithicStepper,
    ScenarioConfig,
    assemble_monolithic,
    build_grid,
    load_scenario,
)
from .krylov import bicgstab, pd_gmres
from .precond import build_block_preconditioner
from .sparse import lu_factor, lu_solve

__all__ = [
    "CoupledProblem",
    "CoupledSystem",
    "CouplingConfig",
    "MonolithicStepper",
    "ScenarioConfig",
    "assemble_monolithic",
    "bicgstab",
    "build_block_preconditioner",
    "build_grid",
    "coupled_timestep",
    "load_scenario",
    "lu_factor",
    "lu_solve",
    "pd_gmres",
]

__version__ = "0.1.0"
