import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpmpc.quad_core import (
    GRAVITY,
    IntegrationError,
    QuadParams,
    QuadState,
    collective_wrench,
    f_dyn,
    nominal_dyn,
    rk4_increment,
    rk4_step,
)
from gpmpc.quaternion import quat_from_axis_angle

from conftest import random_states


def test_equal_thrusts_give_pure_collective_thrust(params):
    T_B, tau_B = collective_wrench(np.full(4, 1.7), params)
    assert np.allclose(T_B, [0, 0, 6.8])
    assert np.allclose(tau_B, 0, atol=1e-15)


def test_roll_torque_from_one_side(params):
    p = QuadParams(d_y=0.1)
    _, tau = collective_wrench([0, 0, 2.0, 2.0], p)
    assert tau[0] == pytest.approx(0.2 * 2.0)


def test_allocation_hand_evaluation():
    # frozen from an independent hand evaluation of the allocation rows
    p = QuadParams(d_x=0.1, d_y=0.1, c_tau=0.01)
    _, tau = collective_wrench([1.0, 2.0, 3.0, 4.0], p)
    assert np.allclose(tau, [0.4, 0.0, 0.02], atol=1e-15)


def test_hover_is_equilibrium(params):
    xd = f_dyn(QuadState.hover(), np.full(4, params.hover_thrust), params)
    assert np.allclose(xd.dv, 0, atol=1e-15)
    assert np.allclose(xd.domega, 0)
    assert np.allclose(xd.dq, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-1, 1), st.floats(-1, 1))
def test_free_fall_any_attitude(angle, ax, ay):
    p = QuadParams()
    q = quat_from_axis_angle([ax, ay, 1.0], angle)
    xd = f_dyn(QuadState(q_WB=q, v_WB=[1.0, 2.0, 3.0]), np.zeros(4), p)
    assert np.allclose(xd.dv, [0, 0, -GRAVITY])
    assert np.allclose(xd.dp, [1.0, 2.0, 3.0])


def test_twice_hover_thrust_accelerates_up_one_g(params):
    xd = f_dyn(QuadState.hover(), np.full(4, 2 * params.hover_thrust), params)
    assert np.allclose(xd.dv, [0, 0, GRAVITY])


def test_rk4_matches_exponential_to_fifth_order():
    a = -1.3
    errs = []
    for dt in (0.1, 0.05):
        x1 = 1.0 + rk4_increment(lambda x, u: a * x, np.array([1.0]), None, dt)[0]
        errs.append(abs(x1 - math.exp(a * dt)))
    assert errs[0] / errs[1] == pytest.approx(32.0, rel=0.05)


def test_hover_step_keeps_state(params):
    x = QuadState.hover([1.0, 2.0, 3.0])
    x1 = rk4_step(x, np.full(4, params.hover_thrust), 0.3, nominal_dyn(params))
    assert np.allclose(x1.as_array(), x.as_array(), atol=1e-15)


def test_free_fall_closed_form(params):
    # ballistic solution from rest: v_z = -g t, p_z = -g t^2 / 2 at t = 0.1
    x1 = rk4_step(QuadState.hover(), np.zeros(4), 0.1, nominal_dyn(params))
    assert x1.v_WB[2] == pytest.approx(-0.981, abs=1e-12)
    assert x1.p_WB[2] == pytest.approx(-0.04905, abs=1e-12)


def test_rk4_renormalizes_quaternion(params, rng):
    x = random_states(rng, 1)[0]
    x1 = rk4_step(x, rng.uniform(0, params.T_max, 4), 0.05, nominal_dyn(params))
    assert np.linalg.norm(x1[3:7]) == pytest.approx(1.0, abs=1e-14)
    assert x1[3] >= 0


def test_nonfinite_derivative_raises(params):
    with pytest.raises(IntegrationError):
        rk4_step(QuadState.hover(), [np.nan, 0, 0, 0], 0.01, nominal_dyn(params))


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        QuadParams(m=-1.0)
    with pytest.raises(ValueError):
        QuadParams(T_max=1.0)  # cannot hover 0.8 kg


def test_default_thrust_to_weight(params):
    assert 4 * params.T_max / (params.m * GRAVITY) == pytest.approx(5.0)


def test_params_dict_roundtrip(params):
    assert QuadParams.from_dict(params.to_dict()) == params
