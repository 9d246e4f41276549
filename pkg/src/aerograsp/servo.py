"""Four-point image-based visual servoing on the end-effector camera, the
split of the camera twist onto the manipulator, and the grasp decisions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .arm import ArmParams, forward_kinematics, jacobian
from .geometry import Pose
from .perception import kabsch
from .sensors import CameraIntrinsics, FeatureObservation
from .world import TargetObject

Vec = NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class NormalizedFeatures:
    xy: Vec  # (4, 2)
    depths: Vec  # (4,)

    def __post_init__(self) -> None:
        xy = np.array(self.xy, dtype=float).reshape(4, 2)
        z = np.array(self.depths, dtype=float).reshape(4)
        if not np.all(z > 0.0):
            raise ValueError("feature depths must be > 0")
        xy.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "depths", z)

    @property
    def vector(self) -> Vec:
        return self.xy.reshape(8)

    def points(self) -> Vec:
        """Back-projected corners in the camera frame."""
        return np.column_stack((self.xy * self.depths[:, None], self.depths))

    @classmethod
    def from_points(cls, p_cam: ArrayLike) -> NormalizedFeatures:
        p = np.asarray(p_cam, dtype=float).reshape(4, 3)
        return cls(p[:, :2] / p[:, 2:3], p[:, 2])


def normalize_features(obs: FeatureObservation, intr: CameraIntrinsics) -> NormalizedFeatures:
    uv = np.asarray(obs.pixels, dtype=float)
    xy = np.column_stack(((uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy))
    return NormalizedFeatures(xy, obs.depths)


def interaction_matrix(f: NormalizedFeatures, depths: ArrayLike | None = None) -> Vec:
    """8x6 point-feature interaction matrix for twist (vx, vy, vz, wx, wy, wz)."""
    Z = f.depths if depths is None else np.asarray(depths, dtype=float)
    L = np.empty((8, 6))
    for i in range(4):
        x, y = f.xy[i]
        iz = 1.0 / Z[i]
        L[2 * i] = (-iz, 0.0, x * iz, x * y, -(1.0 + x * x), y)
        L[2 * i + 1] = (0.0, -iz, y * iz, 1.0 + y * y, -x * y, -x)
    return L


def damped_pinv(A: Vec, mu: float) -> Vec:
    """``A^T (A A^T + mu I)^-1``."""
    return A.T @ np.linalg.inv(A @ A.T + mu * np.eye(A.shape[0]))


@dataclass(frozen=True, eq=False)
class ServoState:
    desired: NormalizedFeatures
    gain: float = 0.8
    tolerance: float = 0.01
    damping: float = 1e-3
    constant_depth: bool = False
    error_history: tuple[float, ...] = field(default=())
    converged: bool = False
    degenerate: bool = False
    last_error: Vec = field(default_factory=lambda: np.zeros(8))

    def __post_init__(self) -> None:
        if not self.gain > 0.0:
            raise ValueError("servo gain must be > 0")
        if not self.tolerance > 0.0:
            raise ValueError("convergence tolerance must be > 0")


def ibvs_step(current: NormalizedFeatures, servo: ServoState) -> tuple[Vec, ServoState]:
    """Camera twist ``-gain * pinv(L) e`` with a damped pseudo-inverse.

    Once the feature error sup-norm drops below the tolerance the twist is
    held at zero and the state reports convergence.
    """
    e = current.vector - servo.desired.vector
    history = servo.error_history + (float(np.linalg.norm(e)),)
    if float(np.max(np.abs(e))) < servo.tolerance:
        return np.zeros(6), replace(servo, error_history=history, converged=True, degenerate=False, last_error=e)
    L = interaction_matrix(current, servo.desired.depths if servo.constant_depth else None)
    try:
        twist = -servo.gain * damped_pinv(L, servo.damping) @ e
    except np.linalg.LinAlgError:
        twist = np.full(6, np.nan)
    sv = np.linalg.svd(L, compute_uv=False)
    if not np.all(np.isfinite(twist)) or sv[-1] < 1e-6 * sv[0]:
        return np.zeros(6), replace(servo, error_history=history, converged=False, degenerate=True, last_error=e)
    return twist, replace(servo, error_history=history, converged=False, degenerate=False, last_error=e)


def camera_pose_for_standoff(target: TargetObject, standoff: float) -> Pose:
    """Camera pose facing the marker squarely from ``standoff`` metres."""
    return target.marker_pose.compose(Pose([0.0, 0.0, -standoff]))


def desired_features(marker_half_size: float, standoff: float) -> NormalizedFeatures:
    """Corner features seen by a camera centered on the marker at ``standoff``."""
    return NormalizedFeatures.from_points(marker_corners_local(marker_half_size) + [0.0, 0.0, standoff])


def marker_corners_local(marker_half_size: float) -> Vec:
    h = marker_half_size
    return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])


def estimate_marker_pose(f: NormalizedFeatures, marker_half_size: float) -> Pose:
    """Marker pose in the camera frame from the back-projected RGBD corners."""
    R, t = kabsch(marker_corners_local(marker_half_size), f.points())
    return Pose.from_matrix(R, t)


def estimate_standoff(f: NormalizedFeatures, marker_half_size: float) -> float:
    """Camera-to-marker distance from the apparent size of the feature square."""
    sides = np.linalg.norm(np.roll(f.xy, -1, axis=0) - f.xy, axis=1)
    diag = np.linalg.norm(f.xy[2] - f.xy[0]) + np.linalg.norm(f.xy[3] - f.xy[1])
    scale = 0.5 * (sides.mean() + diag / (2.0 * math.sqrt(2.0)))
    return 2.0 * marker_half_size / scale


@dataclass(frozen=True)
class TriggerDecision:
    fire: bool
    standoff: float


def grasp_trigger(
    current: NormalizedFeatures,
    servo: ServoState,
    marker_half_size: float,
    trigger_distance: float = 0.12,
) -> TriggerDecision:
    """Fire only when the servo has converged and the camera is within the trigger distance."""
    standoff = estimate_standoff(current, marker_half_size)
    return TriggerDecision(bool(servo.converged and standoff <= trigger_distance), standoff)


def end_effector_twist(camera_twist: ArrayLike, q: ArrayLike, arm: ArmParams) -> Vec:
    """Map a camera-frame twist to the end-effector twist in the arm base frame."""
    tw = np.asarray(camera_twist, dtype=float)
    ee = forward_kinematics(q, arm.dh)
    R_bc = ee.rotation @ arm.camera_mount.rotation
    w = R_bc @ tw[3:]
    r = ee.rotation @ arm.camera_mount.position
    v = R_bc @ tw[:3] - np.cross(w, r)
    return np.concatenate((v, w))


def split_command(
    camera_twist: ArrayLike,
    q: ArrayLike,
    arm: ArmParams,
    hold: object = None,
    damping: float = 0.01,
    limit_margin: float = 0.15,
) -> tuple[object, Vec]:
    """Route the whole camera twist to the joints; the vehicle setpoint is passed through.

    Joint rates come from damped least squares on the geometric Jacobian.
    Rates pushing a joint toward a limit shrink linearly inside
    ``limit_margin`` and vanish at the limit.
    """
    q = np.asarray(q, dtype=float)
    tw = np.asarray(camera_twist, dtype=float)
    if not np.any(tw):
        return hold, np.zeros(6)
    xi = end_effector_twist(tw, q, arm)
    J = jacobian(q, arm.dh)
    qd = J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(6), xi)
    lo, hi = arm.joint_limits[:, 0], arm.joint_limits[:, 1]
    room = np.where(qd > 0.0, hi - q, q - lo)
    qd = qd * np.clip(room / limit_margin, 0.0, 1.0)
    return hold, qd


def grasp_check(gripper: Pose, target: TargetObject, pos_tol: float = 0.04, ang_tol: float = 0.26) -> bool:
    """Geometric grasp test: gripper origin near the grasp point, approach axis aligned."""
    d = float(np.linalg.norm(gripper.position - target.grasp_point))
    approach = gripper.rotation[:, 2]
    c = float(np.clip(approach @ target.grasp_axis, -1.0, 1.0))
    return d <= pos_tol and math.acos(c) <= ang_tol
