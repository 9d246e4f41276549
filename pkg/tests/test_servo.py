import math

import numpy as np
import pytest

from aerograsp.arm import ArmParams, jacobian
from aerograsp.geometry import Pose, quat_from_rotvec
from aerograsp.sensors import CameraIntrinsics, FeatureObservation
from aerograsp.servo import (
    NormalizedFeatures,
    ServoState,
    desired_features,
    end_effector_twist,
    estimate_marker_pose,
    estimate_standoff,
    grasp_check,
    grasp_trigger,
    ibvs_step,
    interaction_matrix,
    marker_corners_local,
    normalize_features,
    split_command,
)
from conftest import run_servo_loop, servo_offset_pose

EE = CameraIntrinsics(min_range=0.03, max_range=3.0)
ARM = ArmParams()
H = 0.03


# ---------------------------------------------------------------- normalization


def obs_at(pixels, depths=(1.0, 1.0, 1.0, 1.0)):
    return FeatureObservation(np.asarray(pixels, dtype=float), np.asarray(depths, dtype=float), 0.0)


def test_normalize_examples():
    f = normalize_features(obs_at([[EE.cx, EE.cy], [EE.cx + EE.fx, EE.cy], [EE.cx, EE.cy + EE.fy], [0, 0]]), EE)
    assert np.allclose(f.xy[0], [0.0, 0.0])
    assert np.allclose(f.xy[1], [1.0, 0.0])
    assert np.allclose(f.xy[2], [0.0, 1.0])


def test_normalize_matches_projection():
    rng = np.random.default_rng(0)
    for _ in range(50):
        P = rng.uniform([-0.3, -0.3, 0.2], [0.3, 0.3, 2.0], (4, 3))
        f = normalize_features(obs_at(EE.project(P), P[:, 2]), EE)
        assert np.allclose(f.xy, P[:, :2] / P[:, 2:], atol=1e-12)
        assert np.allclose(f.depths, P[:, 2])


def test_features_need_positive_depth():
    with pytest.raises(ValueError):
        NormalizedFeatures(np.zeros((4, 2)), [1.0, 1.0, 0.0, 1.0])


# ---------------------------------------------------------------- interaction matrix


def test_interaction_rows_at_center():
    L = interaction_matrix(NormalizedFeatures(np.zeros((4, 2)), np.ones(4)))
    assert np.allclose(L[0], [-1, 0, 0, 0, -1, 0])
    assert np.allclose(L[1], [0, -1, 0, 1, 0, 0])


def test_doubling_depth_halves_translation_columns():
    rng = np.random.default_rng(1)
    xy = rng.normal(0, 0.3, (4, 2))
    z = rng.uniform(0.2, 1.0, 4)
    a = interaction_matrix(NormalizedFeatures(xy, z))
    z2 = z.copy()
    z2[2] *= 2.0
    b = interaction_matrix(NormalizedFeatures(xy, z2))
    assert np.allclose(b[4:6, :3], 0.5 * a[4:6, :3], atol=1e-15)
    assert np.array_equal(b[4:6, 3:], a[4:6, 3:])
    assert np.array_equal(np.delete(b, [4, 5], axis=0), np.delete(a, [4, 5], axis=0))


def test_interaction_matrix_predicts_feature_motion():
    # move the camera by a small twist, reproject, compare with L @ twist
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(100):
        P = rng.uniform([-0.3, -0.3, 0.2], [0.3, 0.3, 1.5], (4, 3))
        f0 = NormalizedFeatures.from_points(P)
        twist = rng.normal(0, 1, 6)
        step = Pose(twist[:3] * h, quat_from_rotvec(twist[3:] * h))
        f1 = NormalizedFeatures.from_points(step.apply_inverse(P))
        fd = (f1.vector - f0.vector) / h
        pred = interaction_matrix(f0) @ twist
        assert np.linalg.norm(fd - pred) <= 1e-3 * np.linalg.norm(pred) + 1e-6


# ---------------------------------------------------------------- ibvs step


def test_at_desired_features_twist_is_zero():
    d = desired_features(H, 0.1)
    twist, s = ibvs_step(d, ServoState(d))
    assert np.array_equal(twist, np.zeros(6)) and s.converged


def test_target_to_the_right_moves_camera_right():
    d = desired_features(H, 0.3)
    shifted = NormalizedFeatures.from_points(d.points() + [0.05, 0.0, 0.0])
    twist, s = ibvs_step(shifted, ServoState(d))
    assert twist[0] > 0.0 and not s.converged
    # and a small step along that twist reduces the error
    cam = Pose(twist[:3] * 0.05, quat_from_rotvec(twist[3:] * 0.05))
    after = NormalizedFeatures.from_points(cam.apply_inverse(shifted.points()))
    assert np.linalg.norm(after.vector - d.vector) < np.linalg.norm(shifted.vector - d.vector)


def test_degenerate_features_hold_zero():
    d = desired_features(H, 0.3)
    collapsed = NormalizedFeatures(np.zeros((4, 2)) + 0.2, np.full(4, 0.3))
    twist, s = ibvs_step(collapsed, ServoState(d))
    assert np.array_equal(twist, np.zeros(6)) and s.degenerate


def test_servo_state_validates():
    with pytest.raises(ValueError):
        ServoState(desired_features(H, 0.1), gain=0.0)


def test_closed_loop_from_thirty_degrees_off_axis():
    cam = Pose([0.0, 0.0, -0.3], quat_from_rotvec([0.0, math.radians(30.0), 0.0]))
    cam = Pose(cam.position + [0.15, 0.0, 0.0], cam.orientation)
    ok, steps, errs, _, s = run_servo_loop(cam, H, 0.1)
    assert ok and steps <= 500
    norms = np.array(s.error_history)
    assert np.all(np.diff(norms[1:]) < 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_error_norm_decreases_after_fifth_iteration(seed):
    ok, _, _, _, s = run_servo_loop(servo_offset_pose(seed, 0.1), H, 0.1)
    assert ok
    norms = np.array(s.error_history)
    assert np.all(np.diff(norms[5:]) < 0.0)


# ---------------------------------------------------------------- pose from features


def test_marker_pose_and_standoff_from_features():
    cam = Pose([0.02, -0.01, -0.25], quat_from_rotvec([0.1, -0.2, 0.05]))
    f = NormalizedFeatures.from_points(cam.apply_inverse(marker_corners_local(H)))
    est = estimate_marker_pose(f, H)
    assert est.allclose(cam.inverse(), atol=1e-9)
    square = desired_features(H, 0.2)
    assert estimate_standoff(square, H) == pytest.approx(0.2, rel=1e-12)


# ---------------------------------------------------------------- grasp trigger


def test_trigger_converged_at_twelve_centimetres():
    f = desired_features(H, 0.12)
    assert grasp_trigger(f, ServoState(f, converged=True), H).fire


def test_no_trigger_when_far():
    f = desired_features(H, 0.5)
    d = grasp_trigger(f, ServoState(f, converged=True), H)
    assert not d.fire and d.standoff == pytest.approx(0.5)


def test_no_trigger_unconverged():
    f = desired_features(H, 0.1)
    assert not grasp_trigger(f, ServoState(f, converged=False), H).fire


# ---------------------------------------------------------------- twist split

# well away from singularities: smallest Jacobian singular value about 0.14
Q_GOOD = np.array([0.28, -0.36, -2.1, 0.21, -1.42, -0.01])


def test_zero_twist_gives_zero_rates():
    hold = object()
    h, qd = split_command(np.zeros(6), Q_GOOD, ARM, hold)
    assert h is hold and np.array_equal(qd, np.zeros(6))


def test_joint_rates_reproduce_end_effector_twist():
    rng = np.random.default_rng(3)
    J = jacobian(Q_GOOD, ARM.dh)
    for _ in range(20):
        tw = rng.normal(0, 0.1, 6)
        _, qd = split_command(tw, Q_GOOD, ARM)
        xi = end_effector_twist(tw, Q_GOOD, ARM)
        assert np.linalg.norm(J @ qd - xi) <= 0.05 * np.linalg.norm(xi)


def test_joint_at_limit_does_not_push_outwards():
    rng = np.random.default_rng(4)
    for j in range(6):
        q = Q_GOOD.copy()
        q[j] = ARM.joint_limits[j, 1]
        for _ in range(10):
            _, qd = split_command(rng.normal(0, 0.2, 6), q, ARM)
            assert qd[j] <= 0.0


# ---------------------------------------------------------------- grasp check


def gripper_on(target, offset=(0.0, 0.0, 0.0)):
    z = target.grasp_axis
    x = np.cross([0.0, 0.0, 1.0], z)
    x /= np.linalg.norm(x)
    R = np.column_stack((x, np.cross(z, x), z))
    return Pose.from_matrix(R, target.grasp_point + np.asarray(offset))


def test_grasp_check_examples(ref):
    tgt = ref.target
    assert grasp_check(gripper_on(tgt), tgt)
    assert not grasp_check(gripper_on(tgt, [0.0, 0.1, 0.0]), tgt)
    # closed tolerance: exactly at the boundary still counts
    edge = gripper_on(tgt, [0.0, 0.0, 0.04])
    d = float(np.linalg.norm(edge.position - tgt.grasp_point))
    assert grasp_check(edge, tgt, pos_tol=d)
    assert not grasp_check(edge, tgt, pos_tol=np.nextafter(d, 0.0))


def test_grasp_check_angle(ref):
    tgt = ref.target
    g = gripper_on(tgt)
    tilted = Pose.from_matrix(Pose(np.zeros(3), quat_from_rotvec([0.0, 0.0, 0.3])).rotation @ g.rotation, g.position)
    assert not grasp_check(tilted, tgt, ang_tol=0.26)
    assert grasp_check(tilted, tgt, ang_tol=0.31)
