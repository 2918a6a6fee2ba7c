"""Effective equation via characteristics: exactness, invariants, inversion."""

import numpy as np
import pytest

from hjh.effective import (CharacteristicFan, FanCoverageError, drift_field,
                           eval_u0, fan_invariants, invert_characteristics,
                           solve_effective)
from hjh.problem import InitialData


def test_affine_fan_is_exact(cos_table):
    g = InitialData.affine(1.0)
    fan = solve_effective(cos_table, g, ((-1.0, 1.0),), 0.25)
    hbar1 = np.asarray(cos_table.hbar_at((1.0,))).item()
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, 50)
    for t in (0.0, 0.1, 0.25):
        st = eval_u0(fan, x, t)
        assert np.abs(st.u0 - (x - t * hbar1)).max() < 1e-12
        assert np.abs(st.du0[0] - 1.0).max() < 1e-13
        assert np.abs(st.d2u0).max() < 1e-13
        assert np.abs(st.dtu0 + hbar1).max() < 1e-13


def ramp_fan(cos_table):
    g = InitialData.ramp(0.4, 1.6, 0.35)
    return solve_effective(cos_table, g, ((-1.0, 1.0),), 0.25)


def test_fan_invariants_within_thresholds(cos_table):
    fan = ramp_fan(cos_table)
    inv = fan_invariants(fan, samples=1000, seed=0)
    assert inv["samples"] == 1000
    assert inv["jacobian_min"] >= 1.0 - 1e-12
    assert inv["gradient_constancy"] <= 1e-9
    assert inv["pde_residual"] <= 1e-7


def test_invert_forward_round_trip(cos_table):
    fan = ramp_fan(cos_table)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, 200)
    for t in (0.05, 0.25):
        x0 = invert_characteristics(fan, x, t)
        back = fan.forward(x0, t)[0]
        assert np.abs(back - x).max() < 1e-9
        # feet sit upstream of a rightward-drifting profile
        assert (x0 <= x + 1e-12).all()


def test_foot_map_is_monotone(cos_table):
    fan = ramp_fan(cos_table)
    x = np.linspace(-1, 1, 400)
    x0 = np.asarray(invert_characteristics(fan, x, 0.25)[0])
    assert (np.diff(x0) > 0).all()


def test_time_derivative_matches_difference_quotient(cos_table):
    fan = ramp_fan(cos_table)
    x = np.linspace(-0.8, 0.8, 30)
    t, h = 0.12, 1e-5
    st = eval_u0(fan, x, t)
    fd = (eval_u0(fan, x, t + h).u0 - eval_u0(fan, x, t - h).u0) / (2 * h)
    assert np.abs(st.dtu0 - fd).max() < 1e-6
    # and the stated PDE form: du0/dt = -hbar(du0)
    assert np.abs(st.dtu0 + cos_table.hbar_at(st.du0[0])).max() < 1e-12


def test_ray_kinematics_consistent_with_table(cos_table):
    fan = ramp_fan(cos_table)
    x0 = np.linspace(-0.7, 0.7, 15)
    p = fan.p_at(x0)[0]
    speed = fan.speed_at(x0)[0]
    rate = fan.value_rate(x0)
    assert np.abs(speed - cos_table.bbar_at(p)).max() < 1e-12
    assert np.abs(rate - (p * speed - cos_table.hbar_at(p))).max() < 1e-12


def test_spatial_gradient_is_frozen_initial_gradient(cos_table):
    fan = ramp_fan(cos_table)
    x = np.linspace(-0.9, 0.9, 40)
    t = 0.2
    st = eval_u0(fan, x, t)
    x0 = st.x0[0]
    assert np.abs(st.du0[0] - fan.initial.gradient(x0)[0]).max() < 1e-13
    # spatial difference quotient of u0 agrees with du0
    h = 1e-5
    fd = (eval_u0(fan, x + h, t).u0 - eval_u0(fan, x - h, t).u0) / (2 * h)
    assert np.abs(st.du0[0] - fd).max() < 1e-6


def test_drift_field_guard(cos_table):
    fan = ramp_fan(cos_table)
    b = drift_field(fan, np.linspace(-0.5, 0.5, 9), 0.1)
    assert (np.abs(b[0]) >= fan.zeta_min).all()


def test_fan_rejects_uncovered_initial_data(cos_table):
    # gradients that leave the tabulated box are refused at build time
    wide = InitialData.ramp(0.1, 1.9, 0.35)
    with pytest.raises(ValueError):
        solve_effective(cos_table, wide, ((-1.0, 1.0),), 0.25, 0.1)
    # queries beyond the built hull are refused at evaluation time
    fan = ramp_fan(cos_table)
    with pytest.raises(FanCoverageError):
        invert_characteristics(fan, np.array([50.0]), 0.2)


def test_invert_rejects_negative_time(cos_table):
    fan = ramp_fan(cos_table)
    with pytest.raises(ValueError):
        invert_characteristics(fan, np.array([0.0]), -0.1)


def test_two_dimensional_plane_is_exact(table2d):
    g = InitialData.affine([1.0, 0.8])
    fan = solve_effective(table2d, g, ((-0.3, 0.3), (-0.3, 0.3)), 0.05)
    hb = np.asarray(table2d.hbar_at((1.0, 0.8))).item()
    rng = np.random.default_rng(2)
    x = (rng.uniform(-0.3, 0.3, 40), rng.uniform(-0.3, 0.3, 40))
    for t in (0.0, 0.05):
        st = eval_u0(fan, x, t)
        assert np.abs(st.u0 - (x[0] + 0.8 * x[1] - t * hb)).max() < 1e-10
        assert np.abs(st.du0[0] - 1.0).max() < 1e-11
        assert np.abs(st.du0[1] - 0.8).max() < 1e-11
        assert np.abs(st.d2u0).max() < 1e-10


def test_two_dimensional_ramp_invariants(table2d):
    g = InitialData.ramp([0.7, 0.5], [1.3, 1.1], [0.2, 0.2])
    fan = solve_effective(table2d, g, ((-0.2, 0.2), (-0.2, 0.2)), 0.04)
    inv = fan_invariants(fan, samples=400, seed=0)
    assert inv["jacobian_min"] >= 1.0 - 1e-12
    assert inv["gradient_constancy"] <= 1e-8
    assert inv["pde_residual"] <= 1e-6
    # round trip through the 2D Newton inversion
    rng = np.random.default_rng(3)
    x = (rng.uniform(-0.2, 0.2, 50), rng.uniform(-0.2, 0.2, 50))
    x0 = invert_characteristics(fan, x, 0.04)
    back = fan.forward(x0, 0.04)
    assert np.abs(back[0] - x[0]).max() < 1e-9
    assert np.abs(back[1] - x[1]).max() < 1e-9
