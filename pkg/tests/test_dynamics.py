import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nhmpc.dynamics import (OMEGA_EPS, BoxConstraints, ControlInput, Measurement,
                            RelState, RelVelocities, RobotState, euler_step,
                            exact_step, inverse_measure, measure, rel_step, wrap_to_pi)


def test_exact_step_zero_input_fixes_equilibrium():
    s = exact_step(RobotState(0, 0, 0), ControlInput(0, 0), 1.0)
    assert s == RobotState(0, 0, 0)


def test_exact_step_straight_line():
    s = exact_step(RobotState(0, 0, 0), ControlInput(1, 0), 0.5)
    assert s.x == pytest.approx(0.5) and s.y == 0 and s.theta == 0


def test_exact_step_quarter_turn():
    s = exact_step(RobotState(0, 0, 0), ControlInput(1, math.pi / 2), 1.0)
    assert s.x == pytest.approx(2 / math.pi, abs=1e-12)
    assert s.y == pytest.approx(2 / math.pi, abs=1e-12)
    assert s.theta == pytest.approx(math.pi / 2)


def test_exact_step_branch_continuity():
    for sign in (1.0, -1.0):
        a = exact_step(RobotState(0.3, -0.2, 0.7), ControlInput(0.5, sign * OMEGA_EPS * 1.0000001), 0.7)
        b = exact_step(RobotState(0.3, -0.2, 0.7), ControlInput(0.5, sign * OMEGA_EPS * 0.9999999), 0.7)
        assert np.allclose(a.as_array(), b.as_array(), atol=1e-9)


def test_exact_step_flow_property():
    s0 = RobotState(0.1, 0.4, -0.3)
    u = ControlInput(0.4, 0.9)
    once = exact_step(s0, u, 0.8)
    twice = exact_step(exact_step(s0, u, 0.4), u, 0.4)
    assert np.allclose(once.as_array(), twice.as_array(), atol=1e-12)


def test_euler_step_examples():
    assert euler_step(RobotState(0, 0, 0), ControlInput(0, 0), 0.5) == RobotState(0, 0, 0)
    s = euler_step(RobotState(0, 0, math.pi / 2), ControlInput(1, 0), 0.5)
    assert s.x == pytest.approx(0.0, abs=1e-15) and s.y == pytest.approx(0.5)
    s = euler_step(RobotState(1, 1, 0), ControlInput(1, 1), 0.2)
    assert np.allclose(s.as_array(), [1.2, 1.0, 0.2])


def test_euler_converges_to_exact_quadratically():
    s0 = RobotState(0.0, 0.0, 0.2)
    u = ControlInput(0.6, 0.8)
    errs = []
    for delta in (0.2, 0.1, 0.05):
        e = exact_step(s0, u, delta).as_array() - euler_step(s0, u, delta).as_array()
        errs.append(np.linalg.norm(e))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.2)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.2)


def test_rel_step_examples():
    s = RelState(1.0, 2.0, 0.5, 0.3)
    zero = RelVelocities(0, 0, 0, 0)
    assert rel_step(s, zero, zero, 0.1) == s
    out = rel_step(RelState(1, 0, 0, 0), zero, RelVelocities(0, 0, 0, 1), 0.1)
    assert np.allclose(out.as_array(), [1.0, -0.1, 0.0, -0.1])
    out = rel_step(RelState(0, 0, 0, 0), RelVelocities(1, 0, 0, 0), zero, 0.1)
    assert np.allclose(out.as_array(), [0.1, 0.0, 0.0, 0.0])


def test_rel_step_ground_freezes_vertical():
    out = rel_step(RelState(1, 0, 0.4, 0), RelVelocities(0, 0, 1.0, 0),
                   RelVelocities(0, 0, -1.0, 0), 0.1, ground=True)
    assert out.z == 0.0


def test_measure_examples():
    m = measure(RelState(1, 0, 0, 0.7))
    assert (m.r, m.phi, m.alpha) == (1.0, 0.0, 0.0)
    m = measure(RelState(0, 1, 0, 0))
    assert m.r == pytest.approx(1) and m.phi == pytest.approx(math.pi / 2) and m.alpha == 0
    m = measure(RelState(1, 1, math.sqrt(2), 0))
    assert m.r == pytest.approx(2)
    assert m.phi == pytest.approx(math.pi / 4)
    assert m.alpha == pytest.approx(math.pi / 4)


def test_measure_rejects_origin():
    with pytest.raises(ValueError):
        measure(RelState(0, 0, 0, 1.0))


def test_inverse_measure_examples():
    assert np.allclose(inverse_measure(Measurement(1, 0, 0)).as_array(), [1, 0, 0, 0])
    out = inverse_measure(Measurement(2, math.pi / 4, math.pi / 4))
    assert np.allclose(out.as_array(), [1, 1, math.sqrt(2), 0], atol=1e-12)
    assert np.allclose(inverse_measure(Measurement(0, 1.0, -0.5)).as_array(), [0, 0, 0, 0])


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_round_trip_identity(x, y, z):
    r = math.sqrt(x * x + y * y + z * z)
    if r < 1e-6:
        return
    back = inverse_measure(measure(RelState(x, y, z, 0.0)))
    assert np.allclose(back.as_array()[:3], [x, y, z], atol=1e-12 * max(1.0, r))


def test_non_finite_inputs_raise():
    with pytest.raises(ValueError):
        exact_step(RobotState(math.nan, 0, 0), ControlInput(0, 0), 1.0)
    with pytest.raises(ValueError):
        euler_step(RobotState(0, 0, 0), ControlInput(math.inf, 0), 1.0)
    with pytest.raises(ValueError):
        exact_step(RobotState(0, 0, 0), ControlInput(0, 0), -1.0)


def test_wrap_to_pi():
    assert wrap_to_pi(math.pi) == pytest.approx(math.pi)
    assert wrap_to_pi(-math.pi) == pytest.approx(math.pi)
    assert wrap_to_pi(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_to_pi(0.3) == pytest.approx(0.3)


def test_box_constraints():
    box = BoxConstraints.symmetric(1.0, 2.0)
    assert box.contains([0.5, -1.5])
    assert not box.contains([1.5, 0.0])
    assert np.allclose(box.clip([3.0, -5.0]), [1.0, -2.0])
    with pytest.raises(ValueError):
        BoxConstraints(np.array([1.0]), np.array([-1.0]))


def test_measurement_invariant():
    with pytest.raises(ValueError):
        Measurement(-0.1, 0.0, 0.0)
