"""Acceptance gate: one test per promised behavior of the workbench.

Each test performs its check from scratch, prints a single summary line
with the measured numbers, and asserts both the tolerance and the
wall-clock budget.  Run with output visible:

    pytest tests/test_acceptance.py -v -s
"""

import os
import time

import numpy as np
import pytest

from hjh.cell import (LinearCellOperator, TorusGrid, effective_table,
                      hbar_via_eigenvalue, solve_cell)
from hjh.effective import fan_invariants, solve_effective
from hjh.harness import StudyConfig, emit_report, run_study
from hjh.problem import (Diffusion, InitialData, ProblemSpec,
                         SeparableQuadratic, TrigSeries, default_bounds)
from hjh.reference import solve_reference

from conftest import make_cos_spec

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                          os.pardir, "configs")


def check(name, budget, t0, ok, detail):
    elapsed = time.perf_counter() - t0
    in_budget = budget is None or elapsed < budget
    verdict = "pass" if ok and in_budget else "FAIL"
    limit = "no budget" if budget is None else f"budget {budget:.0f}s"
    print(f"[{name}] {verdict}: {detail}  ({elapsed:.1f}s, {limit})")
    assert ok, f"{name}: {detail}"
    assert in_budget, f"{name} took {elapsed:.1f}s, over its budget"


def make_identity_spec(dim, diffusion=None):
    b = tuple(TrigSeries.constant(dim, 0.0) for _ in range(dim))
    ham = SeparableQuadratic(dim, 1.0, b, TrigSeries.constant(dim, 0.0))
    diff = Diffusion.identity(dim) if diffusion is None else diffusion
    return ProblemSpec(dim=dim, diffusion=diff, hamiltonian=ham,
                       bounds=default_bounds(diff, ham))


@pytest.fixture(scope="module")
def ramp_residual_run(tmp_path_factory):
    """One full run of the ramp residual study, shared by two checks."""
    cfg = StudyConfig.from_file(os.path.join(CONFIG_DIR, "ramp-residual.json"))
    t0 = time.perf_counter()
    report = run_study(cfg)
    elapsed = time.perf_counter() - t0
    outdir = str(tmp_path_factory.mktemp("accept") / "ramp-residual")
    emit_report(report, outdir)
    return cfg, report, outdir, elapsed


def test_quadratic_hamiltonian_collapses_to_p_squared():
    # H = |q|^2 with no potential: hbar(p) = |p|^2 and w = 0 exactly,
    # whatever the diffusion does
    t0 = time.perf_counter()
    a_y = TrigSeries(1, 1.0, (((1,), 0.0, 0.5),))
    spec = make_identity_spec(1, Diffusion.isotropic(1, a_y))
    tb = effective_table(spec, TorusGrid(1, 64), [(-2.0, 2.0)], 0.2)
    p = tb.p_axes[0]
    worst_h = float(np.abs(tb.hbar - p ** 2).max())
    worst_w = float(np.abs(tb.w_values).max())
    spec2 = make_identity_spec(2)
    for pvec in ((0.3, 0.7), (-1.0, 0.5)):
        sol = solve_cell(spec2, TorusGrid(2, 16), pvec)
        worst_h = max(worst_h, abs(sol.gamma - sum(v * v for v in pvec)))
        worst_w = max(worst_w, float(np.abs(sol.w.values).max()))
    ok = p.size == 21 and worst_h < 1e-10 and worst_w < 1e-10
    check("quadratic-collapse", 5.0, t0, ok,
          f"21-node grid, max |hbar - p^2| = {worst_h:.2e}, "
          f"max |w| = {worst_w:.2e} (tol 1e-10)")


def test_effective_hamiltonian_matches_eigenvalue_oracle():
    # nonlinear cell solves against an independent principal-eigenvalue
    # computation on the exponentially transformed operator, N = 256 each
    t0 = time.perf_counter()
    V = TrigSeries(1, 0.0, (((1,), 0.5, 0.0),))
    spec = make_cos_spec()
    grid = TorusGrid(1, 256)
    worst = 0.0
    for p in (0.0, 0.5, -0.5, 1.0, -1.0, 2.0):
        gamma = solve_cell(spec, grid, (p,)).gamma
        eig = hbar_via_eigenvalue(V, p, 256)
        worst = max(worst, abs(gamma - eig))
    check("eigenvalue-oracle", 30.0, t0, worst <= 1e-6,
          f"six p values, max |hbar - eigenvalue| = {worst:.2e} (tol 1e-6)")


def test_table_property_suite_full_box():
    t0 = time.perf_counter()
    spec = make_cos_spec()
    tb = effective_table(spec, TorusGrid(1, 64), [(0.2, 1.8)], 0.02)
    bounds_margin = tb.check_bounds(spec.bounds)
    convexity = tb.check_convexity()
    grad = tb.check_gradient_consistency()
    ok = bounds_margin >= 0.0 and convexity <= 1e-8 and grad <= 1e-5
    check("table-properties", 60.0, t0, ok,
          f"growth margin {bounds_margin:+.2e}, midpoint convexity defect "
          f"{convexity:.2e} (tol 1e-8), drift-vs-slope defect {grad:.2e} "
          f"(tol 1e-5)")


def test_affine_data_is_exact_and_reference_refines():
    # affine initial data: every expansion order annihilates the residual;
    # the fine solver then self-converges at second order under doubling
    t0 = time.perf_counter()
    cfg = StudyConfig.from_file(os.path.join(CONFIG_DIR, "affine-check.json"))
    report = run_study(cfg)
    worst = max(r["residual"] for r in report.rows)
    ok = len(report.rows) == 18 and worst <= 1e-8

    spec = make_cos_spec()
    affine = InitialData.affine(1.0)
    sols = {}
    for n_per in (32, 64, 128):
        sols[n_per] = solve_reference(spec, affine, (-1.75, 1.75), 0.25,
                                      2.0 ** -4, n_per=n_per,
                                      output_times=(0.2, 0.25))
    diffs = []
    for a, b in ((32, 64), (64, 128)):
        mask = np.abs(sols[a].grid.x) <= 0.5
        xa = sols[a].grid.x[mask]
        ib = np.searchsorted(sols[b].grid.x, xa)
        d = np.abs(sols[a].values[-1][mask] - sols[b].values[-1][ib]).max()
        diffs.append(float(d))
    order = float(np.log2(diffs[0] / diffs[1]))
    ok = ok and order >= 1.9
    check("affine-exactness", 120.0, t0, ok,
          f"max residual {worst:.2e} over 18 (m, eps) pairs (tol 1e-8); "
          f"self-convergence order {order:.2f} (need >= 1.9)")


def test_ramp_residual_rates(ramp_residual_run):
    cfg, report, _, elapsed = ramp_residual_run
    t0 = time.perf_counter() - elapsed          # count the shared run
    slopes = {s["m"]: s for s in report.slopes}
    ok = set(slopes) == {1, 2, 3}
    parts = []
    for m in (1, 2, 3):
        s = slopes[m]
        ok = ok and s["status"] == "fitted" and s["slope"] >= m - 0.3
        parts.append(f"m={m}: {s['slope']:.2f}")
    check("ramp-residual-rates", 300.0, t0, ok,
          "fitted slopes " + ", ".join(parts) + " (need >= m - 0.3)")


def test_end_to_end_rates_and_ordering():
    t0 = time.perf_counter()
    cfg = StudyConfig.from_file(os.path.join(CONFIG_DIR, "ramp-e2e.json"))
    report = run_study(cfg)
    slopes = {s["m"]: s for s in report.slopes}
    ok = set(slopes) == {1, 2}
    parts = []
    for m in (1, 2):
        s = slopes[m]
        ok = ok and s["status"] == "fitted" and s["slope"] >= m - 0.3
        parts.append(f"m={m}: {s['slope']:.2f}")
    eps1, e1 = report.series("end-to-end", 1)
    eps2, e2 = report.series("end-to-end", 2)
    ordered = (np.array_equal(eps1, eps2) and eps1.size == 4
               and bool(np.all(e2 < e1)))
    ok = ok and ordered
    check("end-to-end-rates", 1800.0, t0, ok,
          "fitted slopes " + ", ".join(parts)
          + f"; second order beats first at all {eps1.size} eps: {ordered}")


def test_characteristic_fan_invariants():
    t0 = time.perf_counter()
    spec = make_cos_spec()
    tb = effective_table(spec, TorusGrid(1, 64), [(0.2, 1.8)], 0.02)
    fan = solve_effective(tb, InitialData.ramp(0.4, 1.6, 0.35),
                          [(-1.0, 1.0)], 0.25, 0.1)
    inv = fan_invariants(fan, samples=1000, seed=0)
    ok = (inv["jacobian_min"] >= 1.0 - 1e-12
          and inv["gradient_constancy"] <= 1e-9
          and inv["pde_residual"] <= 1e-7)
    check("fan-invariants", 10.0, t0, ok,
          f"1000 samples: Jacobian min {inv['jacobian_min']:.6f} (>= 1), "
          f"gradient drift {inv['gradient_constancy']:.2e} (tol 1e-9), "
          f"equation residual {inv['pde_residual']:.2e} (tol 1e-7)")


def test_linearized_cell_constant_identities():
    t0 = time.perf_counter()
    worst = 0.0
    g1 = TorusGrid(1, 64)
    ones = np.ones(g1.shape)
    a1 = np.ones((1, 1) + g1.shape)
    for b, p, s in ((0.7, 1.3, 0.0), (-0.4, 0.8, 2.5), (0.0, 0.0, -1.1)):
        gamma, v = LinearCellOperator(g1, a1, b * ones[None]).solve(
            p_vec=(p,), source=s * ones)
        worst = max(worst, abs(gamma - (b * p + s)),
                    float(np.abs(v).max()))
    g2 = TorusGrid(2, 16)
    a2 = np.zeros((2, 2) + g2.shape)
    a2[0, 0] = a2[1, 1] = 1.0
    b2 = np.stack([0.3 * np.ones(g2.shape), -0.8 * np.ones(g2.shape)])
    gamma, v = LinearCellOperator(g2, a2, b2).solve(
        p_vec=(1.2, 0.5), source=0.25 * np.ones(g2.shape))
    worst = max(worst, abs(gamma - (0.3 * 1.2 - 0.8 * 0.5 + 0.25)),
                float(np.abs(v).max()))

    # solvability shift: adding a constant to the source moves gamma by it
    spec = make_cos_spec()
    sol = solve_cell(spec, g1, (1.0,))
    mesh = g1.mesh()
    a_vals = np.asarray(spec.diffusion.matrix_values(mesh), dtype=float)
    q = np.array([1.0 + sol.w.deriv(0).values])
    op = LinearCellOperator(g1, a_vals, spec.hamiltonian.grad(q, mesh))
    rng = np.random.default_rng(7)
    src = rng.standard_normal(g1.shape)
    g0, v0 = op.solve(source=src)
    shift = 0.0
    for c in (1.0, -2.5):
        gc, vc = op.solve(source=src + c)
        shift = max(shift, abs(gc - (g0 + c)), float(np.abs(vc - v0).max()))
    ok = worst < 1e-10 and shift < 1e-10
    check("linear-cell-identities", 5.0, t0, ok,
          f"constant drift/source defect {worst:.2e}, shift-linearity "
          f"defect {shift:.2e} (tol 1e-10)")


def test_study_rerun_is_byte_identical(ramp_residual_run, tmp_path):
    cfg, _, outdir, _ = ramp_residual_run
    t0 = time.perf_counter()
    report2 = run_study(StudyConfig.from_file(
        os.path.join(CONFIG_DIR, "ramp-residual.json")))
    outdir2 = str(tmp_path / "again")
    emit_report(report2, outdir2)
    a = open(os.path.join(outdir, "rows.csv"), "rb").read()
    b = open(os.path.join(outdir2, "rows.csv"), "rb").read()
    check("deterministic-rerun", None, t0, a == b,
          f"rows.csv identical across reruns ({len(a)} bytes)")
