import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from stokesdarcy.discretize import DarcyStepper, ScenarioConfig, build_grid
from stokesdarcy.krylov import (
    RestartController,
    SolveReport,
    bicgstab,
    direct_residual,
    pd_gmres,
    power_iteration,
    richardson,
)
from stokesdarcy.precond import ILU0


def test_solve_report_invariants():
    rep = SolveReport(3, [1.0, 0.5, 0.1], True)
    assert rep.final_residual == 0.1
    with pytest.raises(ValueError):
        SolveReport(0, [], True)


def test_gmres_identity_one_iteration():
    b = np.array([1.0, -2.0, 3.0])
    x, rep = pd_gmres(np.eye(3), None, b, 1e-14)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_allclose(x, b)


def krylov_oracle(A, b, k):
    """min |b - A y| over the k-dimensional Krylov space, by dense least squares
    on normalized power vectors."""
    cols, v = [], b.copy()
    for _ in range(k):
        cols.append(v / np.linalg.norm(v))
        v = A @ cols[-1]
    K = np.column_stack(cols)
    c, *_ = np.linalg.lstsq(A @ K, b, rcond=None)
    return np.linalg.norm(b - A @ (K @ c))


def test_gmres_matches_dense_least_squares_oracle():
    n = 50
    d = np.linspace(1.0, 3.0, n)
    A = np.diag(d)
    b = np.random.default_rng(0).standard_normal(n)
    ctrl = RestartController(m_init=n, m_min=n, m_max=n)
    _, rep = pd_gmres(A, None, b, 1e-10 * np.linalg.norm(b), ctrl=ctrl)
    hist = rep.residual_history
    assert rep.converged
    assert all(b_ < a for a, b_ in zip(hist, hist[1:-1]))
    for k in range(1, min(12, len(hist) - 1)):
        assert abs(hist[k] - krylov_oracle(A, b, k)) <= 1e-12 * np.linalg.norm(b)


def test_gmres_residual_monotone_within_cycles():
    rng = np.random.default_rng(2)
    A = sp.random(80, 80, density=0.05, random_state=rng) + sp.eye(80) * 3
    b = rng.standard_normal(80)
    _, rep = pd_gmres(A, None, b, 1e-10 * np.linalg.norm(b))
    assert rep.converged
    assert np.linalg.norm(b - A @ _) <= 1e-10 * np.linalg.norm(b)
    assert all(m >= 3 for m in rep.restart_lengths)


def test_gmres_nonconvergence_is_reported():
    A = np.diag(np.linspace(1, 1000, 40))
    b = np.ones(40)
    _, rep = pd_gmres(A, None, b, 1e-14, max_restarts=1)
    assert not rep.converged and rep.message


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=40))
@settings(max_examples=100, deadline=None)
def test_restart_length_stays_in_bounds(ratios):
    c = RestartController()
    for r in ratios:
        m = c.update(r)
        assert c.m_min <= m <= c.m_max


@given(st.floats(1e-8, 1.0))
@settings(max_examples=100, deadline=None)
def test_constant_rate_reaches_fixed_restart_length(ratio):
    c = RestartController()
    seq = [c.update(ratio) for _ in range(60)]
    assert len(set(seq[-5:])) == 1
    # monotone approach: no oscillation
    diffs = np.diff(seq)
    assert np.all(diffs >= 0) or np.all(diffs <= 0)


def test_default_controller_bounds():
    c = RestartController()
    assert (c.m_init, c.m_min, c.m_max) == (3, 3, 53)
    with pytest.raises(ValueError):
        RestartController(m_init=2, m_min=3)


def test_bicgstab_identity():
    b = np.array([1.0, 2.0, 3.0])
    x, rep = bicgstab(np.eye(3), None, b, 1e-14)
    assert rep.iterations == 1 and rep.converged
    np.testing.assert_allclose(x, b)


def test_bicgstab_nonsymmetric_2x2():
    A = np.array([[1.0, 2.0], [0.0, 1.0]])
    b = np.array([1.0, 2.0])
    x, rep = bicgstab(A, None, b, 1e-14)
    assert rep.converged and rep.iterations <= 2
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-14)


def test_bicgstab_ilu_reduces_iterations():
    cfg = ScenarioConfig(cells_per_unit_square=16)
    g = build_grid(cfg)
    ds = DarcyStepper(g, cfg)
    b = ds.rhs(np.linspace(0.0, 1.0, g.n))
    tol = 1e-10 * np.linalg.norm(b)
    _, plain = bicgstab(ds.matrix, None, b, tol)
    _, pre = bicgstab(ds.matrix, ILU0(ds.matrix), b, tol)
    assert plain.converged and pre.converged
    assert pre.iterations < plain.iterations


def test_richardson():
    b = np.array([1.0, 2.0])
    x0 = np.array([0.3, -0.1])
    np.testing.assert_array_equal(richardson(np.eye(2), None, b, 1.0, 0, x0=x0), x0)
    np.testing.assert_array_equal(richardson(np.eye(2), None, b, 1.0, 1), b)
    A = np.diag([1.0, 2.0])
    x = richardson(A, None, b, 2.0 / 3.0, 60)
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-12)


def test_power_iteration_examples():
    est = power_iteration(np.diag([1.0, 2.0, 5.0]), tol_rel=1e-10)
    assert est.converged and abs(est.value - 5.0) < 1e-6
    assert abs(power_iteration(np.eye(4)).value - 1.0) < 1e-12
    rng = np.random.default_rng(11)
    M = rng.standard_normal((20, 20))
    A = M @ M.T + 20 * np.eye(20)
    est = power_iteration(A, tol_rel=1e-10, max_iters=5000)
    assert abs(est.value - np.linalg.eigvalsh(A)[-1]) <= 0.01 * np.linalg.eigvalsh(A)[-1]


def test_direct_residual_small():
    A = sp.diags([1.0, 2.0, 3.0]).tocsr()
    res, x = direct_residual(A, np.ones(3))
    assert res < 1e-15
    np.testing.assert_allclose(x, [1, 0.5, 1 / 3])
