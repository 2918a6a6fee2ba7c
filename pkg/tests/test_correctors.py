"""Corrector hierarchy: exactness on affine data, decay rates, consistency.

The two-dimensional build near the end dominates this file's runtime
(around a minute); everything else reuses the session fixtures.
"""

import numpy as np
import pytest

from hjh.cell import TorusGrid
from hjh.correctors import SlowGrid, build_hierarchy
from hjh.effective import eval_u0
from hjh.problem import (CustomHamiltonian, Diffusion, InitialData,
                         ProblemSpec)
from hjh.spectral import trig_eval

from conftest import fit_slope

EPS_SWEEP = [2.0 ** -k for k in range(2, 7)]


@pytest.fixture(scope="module")
def affine_hier(spec_cos, cos_table, affine_g):
    return build_hierarchy(spec_cos, cos_table, affine_g, [(-1.0, 1.0)], 0.25, 3)


# -- slow grid --------------------------------------------------------------

def test_slow_grid_geometry():
    sg = SlowGrid.from_window([(-1.0, 1.0)], 0.25, 0.05, 0.0125, pad=2.0)
    assert sg.dim == 1
    ax = sg.x_axes[0]
    assert ax[0] <= -3.0 + 1e-12 and ax[-1] >= 3.0 - 1e-12
    assert abs(sg.hx[0] - 0.05) < 0.01
    assert abs(sg.ht - 0.0125) < 0.005
    assert sg.t_axis[0] == 0.0 and sg.t_axis[-1] == 0.25
    assert sg.shape == (ax.size, sg.t_axis.size)
    (mask,) = sg.window_masks()
    inside = ax[mask]
    assert inside.min() >= -1.0 - 1e-9 and inside.max() <= 1.0 + 1e-9
    assert mask.sum() >= 30


# -- build validation -------------------------------------------------------

def test_build_rejects_zero_levels(spec_cos, cos_table, ramp_g):
    with pytest.raises(ValueError):
        build_hierarchy(spec_cos, cos_table, ramp_g, [(-1.0, 1.0)], 0.25, 0)


def test_build_rejects_nonquadratic_beyond_first_level(spec_cos, cos_table, ramp_g):
    H = CustomHamiltonian(1, lambda q, y: q[0] ** 2 + 0.1 * np.cos(2 * np.pi * y[0]))
    spec = ProblemSpec(dim=1, diffusion=Diffusion.identity(1), hamiltonian=H,
                       bounds=spec_cos.bounds)
    with pytest.raises(ValueError):
        build_hierarchy(spec, cos_table, ramp_g, [(-1.0, 1.0)], 0.25, 2)


# -- affine data: the expansion terminates ----------------------------------

def test_affine_residuals_vanish(affine_hier):
    for m in (1, 2, 3):
        for eps in [2.0 ** -k for k in range(1, 7)]:
            _, worst = affine_hier.residual_field(eps, m)
            assert worst < 1e-10


def test_affine_top_level_assembles_from_stored_fields(affine_hier):
    # the m -> m-1 telescoping difference is eps^m (ubar_m + fast part)
    hier = affine_hier
    jt = 4
    t = float(hier.slow.t_axis[jt])
    x = np.array([0.3173])
    for m, eps in ((2, 0.25), (3, 0.125)):
        full = hier.evaluate(x, t, eps, m)
        prev = hier.evaluate(x, t, eps, m - 1)
        ystar = np.array([[float(x[0] / eps % 1.0)]])
        fast = trig_eval(hier.wt[m][0, jt], ystar, 1)[0]
        manual = eps ** m * (hier.ubar[m][0, jt] + fast)
        assert abs((full - prev)[0] - manual) < 1e-12


# -- ramp data: decay rates and internal consistency ------------------------

def test_ramp_residual_rates(ramp_hier):
    worsts = {}
    for m in (1, 2, 3):
        errs = [ramp_hier.residual_field(eps, m)[1] for eps in EPS_SWEEP]
        worsts[m] = errs
        assert fit_slope(EPS_SWEEP, errs) >= m - 0.3
    # regression freeze on the endpoints of each sweep
    assert worsts[1][0] == pytest.approx(8.61e-2, rel=0.3)
    assert worsts[1][-1] == pytest.approx(1.33e-3, rel=0.3)
    assert worsts[2][-1] == pytest.approx(3.58e-5, rel=0.3)
    assert worsts[3][-1] == pytest.approx(1.93e-6, rel=0.3)
    # at the smallest eps the hierarchy is monotone in m
    assert worsts[3][-1] < worsts[2][-1] < worsts[1][-1]


def test_residual_identity_route_agrees(ramp_hier):
    for m in (1, 2, 3):
        direct = ramp_hier.residual_field(2.0 ** -4, m, full=True)
        ident = ramp_hier.residual_identity(2.0 ** -4, m)
        assert np.abs(direct - ident).max() < 1e-9


def test_transport_initial_condition_centers_fast_part(ramp_hier):
    # ubar_k(x, 0) cancels the y-mean of the fast part, so the expansion
    # matches g at t=0 up to a mean-free oscillation
    for k in (1, 2, 3):
        fast_mean = ramp_hier.wt[k][:, 0, :].mean(axis=-1)
        total = fast_mean + ramp_hier.ubar[k][:, 0]
        scale = max(np.abs(fast_mean).max(), 1e-30)
        assert np.abs(total).max() < 1e-11 * max(1.0, scale)


def test_evaluate_level_zero_is_effective_solution(ramp_hier):
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.9, 0.9, 25)
    for t in (0.0, 0.1, 0.25):
        eta0 = ramp_hier.evaluate(x, t, 2.0 ** -4, 0)
        st = eval_u0(ramp_hier.fan, x, t)
        assert np.abs(eta0 - st.u0).max() < 1e-11


def test_evaluate_matches_initial_data_mean(ramp_hier):
    # eta_m(., 0) - g has y-mean zero: averaging over one cell at t=0
    # leaves only the oscillation, whose cell average vanishes
    eps = 2.0 ** -5
    m = 2
    xc = 0.25
    cell = xc + eps * (np.arange(64) / 64)
    eta = ramp_hier.evaluate(cell, 0.0, eps, m)
    g = ramp_hier.initial.value(cell)
    offset = np.mean(eta - g)
    assert abs(offset) < 1e-5  # the O(eps) cell-average drift is gone


def test_diagnostics_record_truncation_quality(ramp_hier):
    d = ramp_hier.diagnostics
    assert d["pad"] > 2.0
    for k in (1, 2, 3):
        assert d["fbar_edge"][k] < 1e-4


def test_thread_count_does_not_change_bits(spec_cos, cos_table, ramp_g):
    h1 = build_hierarchy(spec_cos, cos_table, ramp_g, [(-0.5, 0.5)], 0.1, 2,
                         hx=0.1, ht=0.025, threads=1)
    h4 = build_hierarchy(spec_cos, cos_table, ramp_g, [(-0.5, 0.5)], 0.1, 2,
                         hx=0.1, ht=0.025, threads=4)
    assert np.array_equal(h1.gamma, h4.gamma)
    assert np.array_equal(h1.phi[1], h4.phi[1])
    assert np.array_equal(h1.chi, h4.chi)
    assert np.array_equal(h1.fbar[1], h4.fbar[1])
    assert np.array_equal(h1.ubar[2], h4.ubar[2])
    assert np.array_equal(h1.wt[2], h4.wt[2])


# -- two dimensions ---------------------------------------------------------

def test_two_dimensional_hierarchy(spec2d, table2d):
    g2 = InitialData.ramp([0.7, 0.5], [1.3, 1.1], [0.2, 0.2])
    hier = build_hierarchy(spec2d, table2d, g2, [(-0.2, 0.2), (-0.2, 0.2)],
                           0.04, 2, ygrid=TorusGrid(2, 16), hx=0.2, ht=0.01,
                           threads=4, tail_sigmas=3.0, stencil_pad=5.0)
    eps_list = [2.0 ** -k for k in range(2, 6)]
    for m, floor in ((1, 1.6), (2, 2.4)):
        errs = [hier.residual_field(eps, m)[1] for eps in eps_list]
        assert fit_slope(eps_list, errs) >= floor
    for m in (1, 2):
        direct = hier.residual_field(2.0 ** -3, m, full=True)
        ident = hier.residual_identity(2.0 ** -3, m)
        assert np.abs(direct - ident).max() < 1e-8

    ga = InitialData.affine([1.0, 0.8])
    ha = build_hierarchy(spec2d, table2d, ga, [(-0.2, 0.2), (-0.2, 0.2)],
                         0.04, 2, ygrid=TorusGrid(2, 16), hx=0.2, ht=0.01,
                         threads=4, tail_sigmas=3.0, stencil_pad=5.0)
    for m in (1, 2):
        for eps in (0.5, 0.125, 0.03125):
            assert ha.residual_field(eps, m)[1] < 1e-8
