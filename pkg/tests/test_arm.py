import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerograsp.arm import (
    DEFAULT_DH,
    ArmParams,
    JointGains,
    ManipulatorState,
    arm_com,
    coupling_wrench,
    forward_kinematics,
    inverse_kinematics,
    jacobian,
    joint_servo_step,
)
from aerograsp.geometry import Pose, rot_z

ARM = ArmParams()
LO, HI = ARM.joint_limits[:, 0], ARM.joint_limits[:, 1]


def dh_matrix(theta, d, a, alpha):
    # written out independently of the package: Rz(theta) Tz(d) Tx(a) Rx(alpha)
    Rz = np.eye(4)
    Rz[:2, :2] = [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    Tz = np.eye(4)
    Tz[2, 3] = d
    Tx = np.eye(4)
    Tx[0, 3] = a
    Rx = np.eye(4)
    Rx[1:3, 1:3] = [[math.cos(alpha), -math.sin(alpha)], [math.sin(alpha), math.cos(alpha)]]
    return Rz @ Tz @ Tx @ Rx


def test_home_pose_is_product_of_dh_matrices():
    T = np.eye(4)
    for d, a, alpha, off in DEFAULT_DH:
        T = T @ dh_matrix(off, d, a, alpha)
    assert forward_kinematics(np.zeros(6), DEFAULT_DH).allclose(Pose.from_homogeneous(T), atol=1e-12)


@given(st.floats(-2.5, 2.5))
def test_first_joint_rotates_about_base_z(theta):
    q = np.array([0.0, 0.4, -0.8, 0.3, 0.5, 0.1])
    p0 = forward_kinematics(q, DEFAULT_DH).position
    q[0] = theta
    p1 = forward_kinematics(q, DEFAULT_DH).position
    assert np.allclose(p1, rot_z(theta) @ p0, atol=1e-12)


@given(st.integers(0, 5))
def test_fk_is_two_pi_periodic(j):
    q = np.array([0.3, -0.4, 0.7, 0.1, -0.6, 0.2])
    q2 = q.copy()
    q2[j] += 2 * math.pi
    assert forward_kinematics(q, DEFAULT_DH).allclose(forward_kinematics(q2, DEFAULT_DH), atol=1e-12)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        q = rng.uniform(LO, HI)
        J = jacobian(q, DEFAULT_DH)
        h = 1e-6
        for i in range(6):
            dq = np.zeros(6)
            dq[i] = h
            a = forward_kinematics(q + dq, DEFAULT_DH)
            b = forward_kinematics(q - dq, DEFAULT_DH)
            assert np.allclose((a.position - b.position) / (2 * h), J[:3, i], atol=1e-6)


def test_ik_round_trip_thousand_poses():
    rng = np.random.default_rng(2024)
    ok = 0
    for _ in range(1000):
        q_star = rng.uniform(LO * 0.9, HI * 0.9)
        target = forward_kinematics(q_star, DEFAULT_DH)
        seed = np.clip(q_star + rng.normal(0, 0.2, 6), LO, HI)
        res = inverse_kinematics(target, seed, ARM)
        if res.success:
            got = forward_kinematics(res.q, DEFAULT_DH)
            assert np.linalg.norm(got.position - target.position) < 1e-4
            assert np.all(res.q >= LO) and np.all(res.q <= HI)
            ok += 1
    assert ok >= 990


def test_ik_unreachable_fails():
    res = inverse_kinematics(Pose([ARM.reach + 0.1, 0.0, 0.0]), np.zeros(6), ARM)
    assert not res.success
    assert res.position_error > 0.0


def test_ik_seed_at_solution_is_fixed_point():
    q = np.array([0.2, -0.5, 0.9, 0.1, 0.4, -0.3])
    res = inverse_kinematics(forward_kinematics(q, DEFAULT_DH), q, ARM)
    assert res.success and res.iterations <= 2
    assert np.allclose(res.q, q)


# ---------------------------------------------------------------- joint servo


def test_servo_at_goal_is_still():
    s = ManipulatorState(np.array([0.1, 0.2, 0.3, 0, 0, 0]))
    s2 = joint_servo_step(s.q, s, JointGains(), ARM.rate_limits, 0.01)
    assert np.array_equal(s2.q, s.q)


def test_servo_large_error_moves_at_rate_limit():
    s = ManipulatorState(np.zeros(6))
    s2 = joint_servo_step(np.full(6, 1.5), s, JointGains(), ARM.rate_limits, 0.01)
    assert np.allclose(s2.q - s.q, ARM.rate_limits * 0.01, atol=1e-15)


def test_servo_step_response_settles_within_two_seconds():
    # documented settle time: 0.8 rad steps reach 1e-3 rad within 2 s
    s = ManipulatorState(np.zeros(6))
    goal = np.array([0.8, -0.8, 0.8, -0.8, 0.8, -0.8])
    for k in range(200):
        s = joint_servo_step(goal, s, JointGains(), ARM.rate_limits, 0.01)
    assert np.max(np.abs(s.q - goal)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-4.0, 4.0), min_size=6, max_size=6))
def test_servo_respects_limits(goal):
    s = ManipulatorState(np.zeros(6))
    for _ in range(300):
        s = joint_servo_step(np.array(goal), s, JointGains(), ARM.rate_limits, 0.01)
        assert np.all(s.q >= LO) and np.all(s.q <= HI)


def test_gripper_state_validated():
    with pytest.raises(ValueError):
        ManipulatorState(np.zeros(6), gripper="ajar")


# ---------------------------------------------------------------- coupling


def test_stationary_arm_gives_zero_wrench():
    c = arm_com(np.zeros(6), ARM)
    w = coupling_wrench([c, c, c], 0.01, ARM.mass)
    assert np.allclose(w.force, 0.0) and np.allclose(w.moment, 0.0)


def test_reaction_force_is_newtons_third_law():
    a, dt = 2.0, 0.01
    c0 = np.array([0.3, 0.0, -0.2])
    hist = [c0, c0 + [0.5 * a * dt * dt, 0, 0], c0 + [2.0 * a * dt * dt, 0, 0]]
    w = coupling_wrench(hist, dt, ARM.mass)
    assert w.force[0] == pytest.approx(-ARM.mass * a)
    assert np.allclose(w.force[1:], 0.0, atol=1e-9)


def test_mirrored_motions_cancel_roll_and_yaw():
    rng = np.random.default_rng(5)
    M = np.diag([1.0, -1.0, 1.0])
    hist = rng.normal(0, 0.2, (3, 3))
    wa = coupling_wrench(hist, 0.01, ARM.mass)
    wb = coupling_wrench(hist @ M, 0.01, ARM.mass)
    total = wa.moment + wb.moment
    assert abs(total[0]) < 1e-9 and abs(total[2]) < 1e-9


def test_arm_com_mirrors_with_base_joint():
    q = np.array([0.4, -0.6, -1.1, 0.0, 0.7, 0.0])
    qm = q * np.array([-1, 1, 1, -1, 1, -1])
    a, b = arm_com(q, ARM), arm_com(qm, ARM)
    assert np.allclose(a * [1, -1, 1], b, atol=1e-12)
