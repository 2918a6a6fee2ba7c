"""Cell problems: effective constants, correctors, the linearized operator.

The frozen eigenvalue numbers below come from an independent discretization
(fourth-order differences on the exponentially transformed equation, dense
eigensolve) and pin the nonlinear solver to it.
"""

import numpy as np
import pytest

from hjh.cell import (CellSolveError, LinearCellOperator, PeriodicField,
                      TorusGrid, effective_table, hbar_via_eigenvalue,
                      solve_cell, solve_cell_discounted, solve_linear_cell)
from hjh.problem import (Diffusion, InitialData, ProblemSpec,
                         SeparableQuadratic, TrigSeries, default_bounds)

from conftest import make_cos_spec

COS_V = TrigSeries(1, 0.0, (((1,), 0.5, 0.0),))

# independently computed principal-eigenvalue values of the transformed cell
# operator at N=256, for H = q^2 + 0.5 cos(2 pi y), A = 1
EIG_ORACLE = {
    0.0: 0.003166064703469675,
    0.5: 0.2530878644590595,
    -0.5: 0.2530878644281356,
    1.0: 1.0028748391630082,
    -1.0: 1.0028748389851647,
    2.0: 4.0022530769753315,
}


def make_identity_spec(dim, diffusion=None):
    b = tuple(TrigSeries.constant(dim, 0.0) for _ in range(dim))
    ham = SeparableQuadratic(dim, 1.0, b, TrigSeries.constant(dim, 0.0))
    diff = Diffusion.identity(dim) if diffusion is None else diffusion
    return ProblemSpec(dim=dim, diffusion=diff, hamiltonian=ham,
                       bounds=default_bounds(diff, ham))


# -- grids and fields -------------------------------------------------------

def test_torus_grid_geometry():
    g = TorusGrid(1, 16)
    assert g.shape == (16,) and g.size == 16
    assert abs(g.h - 1.0 / 16) < 1e-15
    assert np.abs(g.axis() - np.arange(16) / 16).max() == 0.0
    g2 = TorusGrid(2, 8)
    assert g2.shape == (8, 8) and g2.size == 64
    mesh = g2.mesh()
    assert mesh[0].shape == (8, 8)
    assert np.abs(mesh[1][0] - np.arange(8) / 8).max() == 0.0
    with pytest.raises(ValueError):
        TorusGrid(1, 7)
    with pytest.raises(ValueError):
        TorusGrid(3, 16)


def test_periodic_field_eval_and_deriv():
    g = TorusGrid(1, 32)
    y = g.axis()
    f = PeriodicField(g, np.sin(2 * np.pi * y))
    pts = np.random.default_rng(0).uniform(0, 1, (20, 1))
    assert np.abs(f.eval(pts) - np.sin(2 * np.pi * pts[:, 0])).max() < 1e-12
    df = f.deriv(0)
    assert np.abs(df.values - 2 * np.pi * np.cos(2 * np.pi * y)).max() < 1e-10
    assert abs(f.mean()) < 1e-15


# -- quadratic identity -----------------------------------------------------

def test_identity_hamiltonian_one_dimensional():
    spec = make_identity_spec(1)
    for p in (-1.3, 0.0, 0.7):
        sol = solve_cell(spec, TorusGrid(1, 64), (p,))
        assert abs(sol.gamma - p * p) < 1e-13
        assert np.abs(sol.w.values).max() < 1e-13


def test_identity_hamiltonian_oscillatory_diffusion():
    # a varying a(y) must not disturb the flat corrector
    a_y = TrigSeries(1, 1.0, (((1,), 0.0, 0.5),))
    spec = make_identity_spec(1, Diffusion.isotropic(1, a_y))
    tb = effective_table(spec, TorusGrid(1, 64), [(-2.0, 2.0)], 0.2)
    p = tb.p_axes[0]
    assert p.size == 21
    assert np.abs(tb.hbar - p ** 2).max() < 1e-10
    assert np.abs(tb.w_values).max() < 1e-10


def test_identity_hamiltonian_two_dimensional():
    spec = make_identity_spec(2)
    for pvec in ((0.3, 0.7), (-1.0, 0.5)):
        sol = solve_cell(spec, TorusGrid(2, 16), pvec)
        assert abs(sol.gamma - sum(v * v for v in pvec)) < 1e-12
        assert np.abs(sol.w.values).max() < 1e-12


# -- eigenvalue cross-check -------------------------------------------------

def test_eigenvalue_oracle_frozen_values():
    for p, expect in EIG_ORACLE.items():
        got = hbar_via_eigenvalue(COS_V, p, 256)
        assert got == pytest.approx(expect, rel=1e-12, abs=0.0)


def test_solve_cell_matches_eigenvalue_oracle():
    spec = make_cos_spec()
    grid = TorusGrid(1, 64)
    for p, oracle in EIG_ORACLE.items():
        sol = solve_cell(spec, grid, (p,))
        assert abs(sol.gamma - oracle) < 5e-10
        assert sol.w.values.flat[0] == 0.0  # anchored at the marked node
        assert sol.check_bounds(spec.bounds)


def test_solve_cell_gamma_grid_independent():
    spec = make_cos_spec()
    g1 = solve_cell(spec, TorusGrid(1, 64), (1.0,)).gamma
    g2 = solve_cell(spec, TorusGrid(1, 128), (1.0,)).gamma
    assert abs(g1 - g2) < 1e-11


def test_solve_cell_fd2_mode_second_order():
    spec = make_cos_spec()
    oracle = EIG_ORACLE[1.0]
    e64 = abs(solve_cell(spec, TorusGrid(1, 64), (1.0,), mode="fd2").gamma - oracle)
    e128 = abs(solve_cell(spec, TorusGrid(1, 128), (1.0,), mode="fd2").gamma - oracle)
    assert e64 < 1e-3
    assert e64 / e128 > 3.0


def test_solve_cell_rejects_unknown_mode():
    spec = make_cos_spec()
    with pytest.raises((ValueError, CellSolveError)):
        solve_cell(spec, TorusGrid(1, 32), (1.0,), mode="bogus")


def test_discounted_approximation_converges_linearly():
    spec = make_cos_spec()
    grid = TorusGrid(1, 64)
    gamma = solve_cell(spec, grid, (1.0,)).gamma
    gaps = []
    for delta in (0.1, 0.01, 0.001):
        w_delta, diag = solve_cell_discounted(spec, grid, (1.0,), delta)
        gaps.append(np.abs(-delta * w_delta.values - gamma).max())
        assert diag["delta"] == delta
    # the gap tracks delta * osc(w); osc(w) is about 0.024 here
    assert gaps[0] < 2e-3 and gaps[1] < 2e-4 and gaps[2] < 2e-5
    assert 8.0 < gaps[0] / gaps[1] < 12.0
    assert 8.0 < gaps[1] / gaps[2] < 12.0


# -- linearized operator ----------------------------------------------------

def test_linear_cell_constant_identity_1d():
    grid = TorusGrid(1, 64)
    ones = np.ones(grid.shape)
    a_vals = np.ones((1, 1) + grid.shape)
    for b, p, s in ((0.7, 1.3, 0.0), (-0.4, 0.8, 2.5), (0.0, 0.0, -1.1)):
        op = LinearCellOperator(grid, a_vals, b * ones[None])
        gamma, v = op.solve(p_vec=(p,), source=s * ones)
        assert abs(gamma - (b * p + s)) < 1e-12
        assert np.abs(v).max() < 1e-12


def test_linear_cell_constant_identity_2d():
    grid = TorusGrid(2, 16)
    a_vals = np.zeros((2, 2) + grid.shape)
    a_vals[0, 0] = 1.0
    a_vals[1, 1] = 1.0
    b_vals = np.stack([0.3 * np.ones(grid.shape), -0.8 * np.ones(grid.shape)])
    op = LinearCellOperator(grid, a_vals, b_vals)
    gamma, v = op.solve(p_vec=(1.2, 0.5), source=0.25 * np.ones(grid.shape))
    assert abs(gamma - (0.3 * 1.2 - 0.8 * 0.5 + 0.25)) < 1e-12
    assert np.abs(v).max() < 1e-12


def real_drift_operator():
    """Linearization around the actual corrector of the cosine problem."""
    spec = make_cos_spec()
    grid = TorusGrid(1, 64)
    sol = solve_cell(spec, grid, (1.0,))
    mesh = grid.mesh()
    a_vals = np.asarray(spec.diffusion.matrix_values(mesh), dtype=float)
    dw = sol.w.deriv(0).values
    q = np.array([1.0 + dw])
    b_vals = spec.hamiltonian.grad(q, mesh)
    return grid, a_vals, b_vals


def test_linear_cell_shift_linearity():
    grid, a_vals, b_vals = real_drift_operator()
    op = LinearCellOperator(grid, a_vals, b_vals)
    rng = np.random.default_rng(7)
    s = rng.standard_normal(grid.shape)
    g0, v0 = op.solve(source=s)
    for c in (1.0, -2.5):
        gc, vc = op.solve(source=s + c)
        assert abs(gc - (g0 + c)) < 1e-10
        assert np.abs(vc - v0).max() < 1e-10


def test_linear_cell_additivity_and_wrapper():
    grid, a_vals, b_vals = real_drift_operator()
    op = LinearCellOperator(grid, a_vals, b_vals)
    rng = np.random.default_rng(8)
    s1 = rng.standard_normal(grid.shape)
    s2 = rng.standard_normal(grid.shape)
    ga, va = op.solve(source=s1)
    gb, vb = op.solve(source=s2)
    gab, vab = op.solve(source=s1 + s2)
    assert abs(gab - (ga + gb)) < 1e-9
    assert np.abs(vab - (va + vb)).max() < 1e-9
    gw, vw = solve_linear_cell(a_vals, PeriodicField(grid, b_vals), source=s1)
    assert abs(gw - ga) < 1e-12
    assert np.abs(vw.values - va).max() < 1e-12


def test_linear_cell_matches_table_drift(spec_cos, cos_table):
    # the linearized constant at a table node reproduces the tabulated drift
    grid, a_vals, b_vals = real_drift_operator()
    op = LinearCellOperator(grid, a_vals, b_vals)
    gamma, _ = op.solve(p_vec=(1.0,))
    assert abs(gamma - cos_table.bbar_at((1.0,))[0]) < 1e-10


# -- effective table --------------------------------------------------------

def test_table_nodes_match_direct_solves(spec_cos, cos_table):
    grid = TorusGrid(1, 64)
    for p in (0.2, 1.0, 1.8):
        direct = solve_cell(spec_cos, grid, (p,))
        assert abs(cos_table.hbar_at((p,)) - direct.gamma) < 1e-12
        w_tab = cos_table.w_at((p,))
        assert np.abs(w_tab - direct.w.values).max() < 1e-10


def test_table_interpolation_between_nodes(spec_cos, cos_table):
    grid = TorusGrid(1, 64)
    for p in (0.513, 1.207):
        direct = solve_cell(spec_cos, grid, (p,))
        assert abs(cos_table.hbar_at((p,)) - direct.gamma) < 1e-8
        assert abs(cos_table.bbar_at((p,))[0]
                   - 2e4 * (cos_table.hbar_at((p + 2.5e-5,))
                            - cos_table.hbar_at((p - 2.5e-5,)))) < 1e-6


def test_table_property_suite(spec_cos, cos_table):
    assert cos_table.check_bounds(spec_cos.bounds) >= 0.0
    assert cos_table.check_convexity() <= 1e-8
    assert cos_table.check_gradient_consistency() <= 1e-5
    assert float(np.asarray(cos_table.d2hbar_at((1.0,))).squeeze()) > 0.5


def test_table_rejects_points_outside_box(cos_table):
    with pytest.raises(ValueError):
        cos_table.hbar_at((1.95,))
    with pytest.raises(ValueError):
        cos_table.w_at((0.1,))


def test_table_two_dimensional(spec2d, table2d):
    p = (1.0, 0.8)
    direct = solve_cell(spec2d, TorusGrid(2, 16), p)
    assert abs(table2d.hbar_at(p) - direct.gamma) < 1e-10
    assert table2d.check_bounds(spec2d.bounds) >= 0.0
    assert table2d.check_convexity() <= 1e-8
    assert table2d.check_gradient_consistency() <= 1e-3
    w = table2d.w_at(p)
    assert w.shape == (16, 16)
    # the inexact-Krylov continuation leaves a little more slack than in 1D
    assert np.abs(w - direct.w.values).max() < 1e-6
