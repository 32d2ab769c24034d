import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gateracer.dynamics import (
    QuadParams, QuadState, RotorCommand, Wrench, derivative, hover_state, rotor_to_wrench, step_rk4,
)
from gateracer.geometry import quat_to_rot

P = QuadParams()


def quat_strategy():
    return st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
        lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: np.asarray(v) / np.linalg.norm(v))


def test_params_defaults_and_f_max():
    assert P.mass == 1.0 and P.inertia_diag == (0.003, 0.003, 0.005)
    assert 4 * P.f_max == pytest.approx(6.4 * P.mass * P.gravity, abs=1e-9)
    heavy = QuadParams(mass=2.5, thrust_to_weight=3.3)
    assert 4 * heavy.f_max == pytest.approx(3.3 * 2.5 * 9.81, abs=1e-9)


@pytest.mark.parametrize("kwargs", [
    {"mass": 0.0}, {"inertia_diag": (0.003, 0.0, 0.005)}, {"arm_length": -1.0},
    {"f_min": 100.0}, {"thrust_to_weight": 0.0},
])
def test_params_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        QuadParams(**kwargs)


def test_rotor_command_clamps():
    cmd = RotorCommand.clamped([-1.0, 0.5, 100.0, 2.0], P)
    np.testing.assert_array_equal(cmd.f, [0.0, 0.5, P.f_max, 2.0])


@pytest.mark.parametrize("f, c, eta", [
    ([2.4525] * 4, 9.81, [0, 0, 0]),
    ([1, 0, 0, 1], 2.0, [0.17 / math.sqrt(2) * 2, 0, 0]),
    ([1, 0, 1, 0], 2.0, [0, 0, 0.02]),
])
def test_rotor_to_wrench_examples(f, c, eta):
    w = rotor_to_wrench(RotorCommand(np.array(f, dtype=float)), P)
    assert w.c == pytest.approx(c, abs=1e-12)
    np.testing.assert_allclose(w.eta, eta, atol=1e-12)


def test_rotor_to_wrench_hand_value():
    w = rotor_to_wrench(RotorCommand(np.array([1.0, 0, 0, 1.0])), P)
    assert w.eta[0] == pytest.approx(0.24042, abs=1e-5)


@given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.floats(0, 5))
def test_wrench_linear_in_thrust(f, alpha):
    f = np.array(f)
    w1 = rotor_to_wrench(RotorCommand(alpha * f), P)
    w0 = rotor_to_wrench(RotorCommand(f), P)
    assert w1.c == pytest.approx(alpha * w0.c, abs=1e-9)
    np.testing.assert_allclose(w1.eta, alpha * w0.eta, atol=1e-9)
    assert w0.c >= 0


def test_derivative_hover_is_equilibrium():
    d = derivative(hover_state(), Wrench(P.gravity, np.zeros(3)), P)
    np.testing.assert_allclose(d.to_vector(), 0.0, atol=1e-15)


def test_derivative_free_fall():
    d = derivative(QuadState(), Wrench(0.0, np.zeros(3)), P)
    np.testing.assert_allclose(d.v, [0, 0, -9.81], atol=1e-15)
    np.testing.assert_allclose(np.concatenate([d.p, d.q, d.w]), 0.0, atol=1e-15)


def test_derivative_principal_axis_spin():
    s = QuadState(w=np.array([0.0, 0.0, 1.0]))
    d = derivative(s, Wrench(0.0, np.zeros(3)), P)
    np.testing.assert_allclose(d.w, 0.0, atol=1e-15)
    # quaternion rate for a pure z spin at identity: 0.5 * [0, 0, 0, 1]
    np.testing.assert_allclose(d.q, [0, 0, 0, 0.5], atol=1e-15)


def test_derivative_gyroscopic_term():
    w = np.array([1.0, 2.0, 0.0])
    d = derivative(QuadState(w=w), Wrench(0.0, np.zeros(3)), P)
    J = np.diag(P.inertia_diag)
    np.testing.assert_allclose(d.w, np.linalg.solve(J, -np.cross(w, J @ w)), atol=1e-12)


def test_derivative_thrust_rotated_into_world():
    q = np.array([math.cos(0.25), math.sin(0.25), 0.0, 0.0])  # 0.5 rad about x
    d = derivative(QuadState(q=q), Wrench(10.0, np.zeros(3)), P)
    np.testing.assert_allclose(d.v, quat_to_rot(q) @ [0, 0, 10.0] - [0, 0, 9.81], atol=1e-12)
    np.testing.assert_allclose(d.v, [0, -10 * math.sin(0.5), 10 * math.cos(0.5) - 9.81], atol=1e-12)


def test_free_fall_analytic():
    s = QuadState()
    zero = RotorCommand(np.zeros(4))
    for _ in range(100):
        s = step_rk4(s, zero, 0.01, P)
    assert s.v[2] == pytest.approx(-9.81, abs=1e-9)
    assert s.p[2] == pytest.approx(-4.905, abs=1e-9)
    np.testing.assert_allclose(s.a, [0, 0, -9.81], atol=1e-12)


def test_hover_preserved():
    s = hover_state((1.0, 2.0, 3.0), yaw=0.7)
    cmd = RotorCommand(np.full(4, P.hover_thrust))
    for _ in range(1000):
        s = step_rk4(s, cmd, 0.002, P)
    assert np.linalg.norm(s.v) < 1e-9
    assert np.linalg.norm(s.w) < 1e-9
    np.testing.assert_allclose(s.p, [1, 2, 3], atol=1e-9)


def test_yaw_torque_linear_spin_rate():
    d = 0.3
    h = P.hover_thrust
    cmd = RotorCommand(np.array([h + d, h - d, h + d, h - d]))
    eta_z = P.torque_const * 4 * d
    s = QuadState()
    dt = 0.002
    for _ in range(50):
        s = step_rk4(s, cmd, dt, P)
    assert s.w[2] == pytest.approx(eta_z / P.inertia_diag[2] * 0.1, abs=1e-6)
    np.testing.assert_allclose(s.w[:2], 0.0, atol=1e-12)


def test_rk4_convergence_order():
    cmd = RotorCommand(np.array([2.6, 2.4, 2.5, 2.55]))

    def run(dt, T=0.5):
        s = QuadState()
        for _ in range(int(round(T / dt))):
            s = step_rk4(s, cmd, dt, P)
        return s.p

    dt = 0.01
    ref = run(dt / 100)
    ratio = np.linalg.norm(run(dt) - ref) / np.linalg.norm(run(dt / 2) - ref)
    assert 12 <= ratio <= 20


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        step_rk4(QuadState(), RotorCommand(np.zeros(4)), 0.0, P)


def test_step_clamps_commands():
    s = hover_state((0, 0, 5))
    a = step_rk4(s, RotorCommand(np.array([-5.0, -5.0, -5.0, -5.0])), 0.01, P)
    b = step_rk4(s, RotorCommand(np.zeros(4)), 0.01, P)
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())


@settings(max_examples=50, deadline=None)
@given(quat_strategy(), st.lists(st.floats(-10, 10), min_size=3, max_size=3),
       st.lists(st.floats(0, 15), min_size=4, max_size=4))
def test_quaternion_unit_after_step_and_deterministic(q, w, f):
    s = QuadState(q=q, w=np.array(w))
    cmd = RotorCommand(np.array(f))
    a = step_rk4(s, cmd, 0.002, P)
    b = step_rk4(s, cmd, 0.002, P)
    assert abs(np.linalg.norm(a.q) - 1.0) < 1e-9
    np.testing.assert_array_equal(a.to_vector(), b.to_vector())


def test_acceleration_cache_is_start_of_step_derivative():
    s = QuadState(q=np.array([math.cos(0.2), 0.0, math.sin(0.2), 0.0]), w=np.array([0.0, 3.0, 0.0]))
    cmd = RotorCommand(np.array([3.0, 3.0, 3.0, 3.0]))
    expected = derivative(s, rotor_to_wrench(cmd, P), P).v
    np.testing.assert_allclose(step_rk4(s, cmd, 0.002, P).a, expected, atol=1e-14)
