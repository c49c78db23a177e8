import csv
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from stokesdarcy.coupling import (
    CoupledProblem,
    CouplingConfig,
    CouplingError,
    IQNILSHistory,
    coupled_timestep,
    iqn_ils_update,
    solve_ff,
    solve_pm,
    write_coupling_log,
)
from stokesdarcy.discretize import MonolithicStepper, ScenarioConfig, build_grid


def monolithic_run(cfg):
    g = build_grid(cfg)
    M = MonolithicStepper(g, cfg)
    v_prev = np.zeros(g.n_velocity)
    out = []
    for step in range(1, cfg.n_steps + 1):
        S = M.system(v_prev, step * cfg.dt)
        x = spla.spsolve(S.matrix.tocsc(), S.rhs)
        v_prev = x[: g.n_velocity]
        out.append(x)
    return out


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# single-domain solves

def test_solve_ff_zero_data_gives_zero():
    cfg = ScenarioConfig(cells_per_unit_square=4, dp_max=0.0)
    g = build_grid(cfg)
    x, p = solve_ff(np.zeros(g.n), np.zeros(g.n_velocity), cfg)
    np.testing.assert_allclose(x, 0.0, atol=1e-30)
    np.testing.assert_allclose(p, 0.0, atol=1e-30)


def test_solve_ff_matches_monolithic_free_flow_part():
    cfg = replace(ScenarioConfig(cells_per_unit_square=6), t_end=2e5)
    g = build_grid(cfg)
    x_mono = monolithic_run(cfg)[0]
    x_ff, _ = solve_ff(x_mono[g.interface_faces], np.zeros(g.n_velocity), cfg, t=cfg.dt)
    assert rel(x_ff, x_mono[g.ff_slice]) < 1e-9


def test_solve_pm_constant_pressure_gives_no_flow():
    cfg = ScenarioConfig(cells_per_unit_square=5)
    p, v = solve_pm(np.full(5, 3.0), cfg)
    np.testing.assert_allclose(p, 3.0, rtol=1e-12)
    np.testing.assert_allclose(v, 0.0, atol=1e-12 * cfg.permeability / cfg.viscosity)


def test_solve_pm_matches_hand_tpfa_on_2x2():
    cfg = ScenarioConfig(cells_per_unit_square=2)
    m = cfg.permeability / cfg.viscosity
    h = 0.5
    pg = np.array([1.0, 0.0])
    # cells: 0=(0,0), 1=(1,0), 2=(0,1), 3=(1,1); row j=1 touches the interface
    A = np.zeros((4, 4))
    b = np.zeros(4)
    for a, c in ((0, 1), (2, 3), (0, 2), (1, 3)):
        A[a, a] += m
        A[c, c] += m
        A[a, c] -= m
        A[c, a] -= m
    for cell, i in ((2, 0), (3, 1)):
        A[cell, cell] += 2 * m
        b[cell] += 2 * m * pg[i]
    p_ref = np.linalg.solve(A, b)
    v_ref = -m * (pg - p_ref[2:]) / (h / 2)
    p, v = solve_pm(pg, cfg)
    np.testing.assert_allclose(p, p_ref, rtol=1e-13)
    np.testing.assert_allclose(v, v_ref, rtol=1e-12)


# fixed-point residual

@pytest.fixture(scope="module")
def problem6():
    cfg = ScenarioConfig(cells_per_unit_square=6, dp_max=0.0)
    return CoupledProblem(cfg)


def test_residual_of_zero_is_zero_without_forcing(problem6):
    g = problem6.grid
    R = problem6.fixed_point_residual(np.zeros(g.n), np.zeros(g.n_velocity))
    np.testing.assert_allclose(R, 0.0, atol=1e-30)


def test_residual_is_affine(problem6):
    g = problem6.grid
    rng = np.random.default_rng(0)
    v_prev = rng.standard_normal(g.n_velocity) * 1e-9
    a, b = rng.standard_normal((2, g.n)) * 1e-9
    R = lambda v: problem6.fixed_point_residual(v, v_prev)
    lhs = R(0.3 * a + 0.7 * b)
    rhs = 0.3 * R(a) + 0.7 * R(b)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(lhs)


def test_residual_vanishes_at_monolithic_trace():
    cfg = replace(ScenarioConfig(cells_per_unit_square=6), t_end=2e5)
    g = build_grid(cfg)
    x = monolithic_run(cfg)[0]
    v = x[g.interface_faces]
    R = CoupledProblem(cfg).fixed_point_residual(v, np.zeros(g.n_velocity), cfg.dt)
    assert np.linalg.norm(R) <= 1e-8 * np.linalg.norm(v)


# IQN-ILS

def test_iqn_single_column_is_secant_step():
    # scalar affine map v -> a v + c; one column makes the step exact
    a, c = 0.4, 1.0
    H = IQNILSHistory(1)
    v0 = np.array([0.0])
    t0 = a * v0 + c
    H.record(t0 - v0, t0)
    v1 = v0 + 0.5 * (t0 - v0)
    t1 = a * v1 + c
    v2 = iqn_ils_update(H, v1, t1 - v1, t1)
    np.testing.assert_allclose(v2, c / (1 - a), rtol=1e-14)


def test_iqn_zero_residual_keeps_iterate():
    H = IQNILSHistory(3)
    H.record(np.array([1.0, 0.0, 0.0]), np.array([1.0, 2.0, 3.0]))
    v = np.array([0.5, -0.5, 2.0])
    np.testing.assert_allclose(iqn_ils_update(H, v, np.zeros(3), v), v)


def test_iqn_empty_history_raises():
    H = IQNILSHistory(2)
    with pytest.raises(ValueError):
        iqn_ils_update(H, np.zeros(2), np.ones(2), np.ones(2))


def test_iqn_history_columns_bounded_and_filtered():
    rng = np.random.default_rng(1)
    H = IQNILSHistory(3)
    for _ in range(10):
        H.record(rng.standard_normal(3), rng.standard_normal(3))
        assert H.columns <= 3
    H.clear()
    H.record(np.array([1.0, 0.0, 0.0]), np.zeros(3))
    H.record(np.array([2.0, 0.0, 0.0]), np.zeros(3))
    H.record(np.array([3.0, 0.0, 0.0]), np.zeros(3))
    assert H.columns == 1


# coupled steps

def test_no_forcing_converges_in_one_iteration():
    cfg = ScenarioConfig(cells_per_unit_square=6, dp_max=0.0)
    g = build_grid(cfg)
    x, its = coupled_timestep(np.zeros(g.n_velocity), cfg.dt, cfg)
    assert its == 1
    assert np.abs(x).max() == 0.0


@pytest.mark.parametrize("n", [2, 6])
def test_partitioned_transient_matches_monolithic(n):
    cfg = ScenarioConfig(cells_per_unit_square=n)
    ref = monolithic_run(cfg)
    P = CoupledProblem(cfg)
    out = P.run()
    assert all(e.converged for e in P.log)
    for a, b in zip(out, ref):
        assert rel(a, b) < 1e-6


def test_iqn_needs_no_more_iterations_than_picard():
    cfg = replace(ScenarioConfig(cells_per_unit_square=16), t_end=4 * 2e5)
    totals = {}
    for acc in ("picard", "iqn_ils"):
        P = CoupledProblem(cfg, CouplingConfig(acceleration=acc))
        P.run()
        assert all(e.converged for e in P.log)
        totals[acc] = [e.iterations for e in P.log]
    assert all(q <= p for q, p in zip(totals["iqn_ils"], totals["picard"]))


def test_inner_solver_choice_barely_changes_iteration_count():
    cfg = replace(ScenarioConfig(cells_per_unit_square=6), t_end=3 * 2e5)
    direct = CoupledProblem(cfg)
    direct.run()
    iterative = CoupledProblem(cfg, CouplingConfig(stokes_solver="uzawa", darcy_solver="amg"))
    out = iterative.run()
    for a, b in zip(direct.log, iterative.log):
        assert abs(a.iterations - b.iterations) <= 1
    assert rel(out[-1], monolithic_run(cfg)[-1]) < 1e-6


def test_nonconvergence_raises_when_requested():
    cfg = ScenarioConfig(cells_per_unit_square=4)
    g = build_grid(cfg)
    ccfg = CouplingConfig(max_coupling_iterations=1, raise_on_failure=True)
    with pytest.raises(CouplingError) as err:
        coupled_timestep(np.zeros(g.n_velocity), cfg.t_end, cfg, ccfg)
    assert err.value.log is not None and not err.value.log.converged


def test_config_validation():
    with pytest.raises(ValueError):
        CouplingConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        CouplingConfig(acceleration="aitken")


def test_coupling_log_csv(tmp_path):
    cfg = replace(ScenarioConfig(cells_per_unit_square=2), t_end=3 * 2e5)
    P = CoupledProblem(cfg)
    P.run()
    path = tmp_path / "log.csv"
    write_coupling_log(path, P.log)
    write_coupling_log(path, P.log[:1], append=True)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 4
    assert [int(r["time_step"]) for r in rows] == [1, 2, 3, 1]
    assert all(float(r["pressure_measure"]) < 1e-8 for r in rows)


@pytest.mark.parametrize("n", [2, 6])
def test_iqn_iterations_bounded_by_interface_dimension(n):
    P = CoupledProblem(ScenarioConfig(cells_per_unit_square=n))
    P.run()
    assert all(e.converged and e.iterations <= n + 2 for e in P.log)
