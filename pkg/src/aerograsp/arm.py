"""6-DOF manipulator: DH kinematics, damped least-squares IK, joint servo and base coupling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .dynamics import Wrench
from .geometry import Pose, rot_x, rotvec_from_matrix

Vec = NDArray[np.float64]

# columns: d, a, alpha, theta_offset (standard DH)
DEFAULT_DH = np.array(
    [
        [0.05, 0.0, math.pi / 2, 0.0],
        [0.0, 0.22, 0.0, math.pi / 2],
        [0.0, 0.0, math.pi / 2, math.pi / 2],
        [0.20, 0.0, -math.pi / 2, 0.0],
        [0.0, 0.0, math.pi / 2, 0.0],
        [0.10, 0.0, 0.0, 0.0],
    ]
)
DEFAULT_LIMITS = np.array(
    [[-2.6, 2.6], [-2.0, 2.0], [-2.4, 2.4], [-2.9, 2.9], [-2.1, 2.1], [-2.9, 2.9]]
)


def _default_mount() -> Pose:
    # arm base under the front of the airframe, base z-axis pointing down
    return Pose.from_matrix(rot_x(math.pi), [0.22, 0.0, -0.10])


def _default_camera_mount() -> Pose:
    # camera 6 cm behind the gripper tip, 3 cm off-axis, looking along the approach axis
    return Pose([0.0, -0.03, -0.06])


@dataclass(frozen=True, eq=False)
class ArmParams:
    dh: Vec = field(default_factory=lambda: DEFAULT_DH.copy())
    joint_limits: Vec = field(default_factory=lambda: DEFAULT_LIMITS.copy())
    rate_limits: Vec = field(default_factory=lambda: np.full(6, 1.2))
    link_masses: Vec = field(default_factory=lambda: np.array([0.10, 0.15, 0.08, 0.12, 0.05, 0.10]))
    mount: Pose = field(default_factory=_default_mount)
    camera_mount: Pose = field(default_factory=_default_camera_mount)

    def __post_init__(self) -> None:
        dh = np.array(self.dh, dtype=float)
        lim = np.array(self.joint_limits, dtype=float)
        if dh.shape != (6, 4):
            raise ValueError("DH table must have 6 rows of (d, a, alpha, theta_offset)")
        if lim.shape != (6, 2) or np.any(lim[:, 0] >= lim[:, 1]):
            raise ValueError("joint limits must be 6 increasing [min, max] pairs")
        for name, v in (("dh", dh), ("joint_limits", lim)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "rate_limits", np.asarray(self.rate_limits, dtype=float).reshape(6))
        object.__setattr__(self, "link_masses", np.asarray(self.link_masses, dtype=float).reshape(6))

    @property
    def reach(self) -> float:
        return float(np.abs(self.dh[:, 0]).sum() + np.abs(self.dh[:, 1]).sum())

    @property
    def mass(self) -> float:
        return float(self.link_masses.sum())

    def clip(self, q: ArrayLike) -> Vec:
        return np.clip(np.asarray(q, dtype=float), self.joint_limits[:, 0], self.joint_limits[:, 1])


def _dh_transform(theta: float, d: float, a: float, alpha: float) -> Vec:
    ct, st = math.cos(theta), math.sin(theta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, a * ct],
            [st, ct * ca, -ct * sa, a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def fk_frames(q: ArrayLike, dh: ArrayLike) -> list[Vec]:
    """Homogeneous transforms of frames 0..6 expressed in the arm base frame."""
    dh = np.asarray(dh, dtype=float)
    T = np.eye(4)
    frames = [T]
    for qi, (d, a, alpha, off) in zip(q, dh):
        T = T @ _dh_transform(qi + off, d, a, alpha)
        frames.append(T)
    return frames


def forward_kinematics(q: ArrayLike, dh: ArrayLike) -> Pose:
    return Pose.from_homogeneous(fk_frames(q, dh)[-1])


def jacobian(q: ArrayLike, dh: ArrayLike) -> Vec:
    """Geometric Jacobian (linear rows first) of the end effector in the base frame."""
    frames = fk_frames(q, dh)
    p_end = frames[-1][:3, 3]
    J = np.zeros((6, 6))
    for i in range(6):
        z = frames[i][:3, 2]
        J[:3, i] = np.cross(z, p_end - frames[i][:3, 3])
        J[3:, i] = z
    return J


def pose_residual(current: Pose, target: Pose) -> Vec:
    """6-vector (position error, rotation-vector error) taking ``current`` to ``target``."""
    e = np.empty(6)
    e[:3] = target.position - current.position
    e[3:] = rotvec_from_matrix(target.rotation @ current.rotation.T)
    return e


@dataclass(frozen=True)
class IKResult:
    q: Vec
    success: bool
    position_error: float
    angle_error: float
    iterations: int


def _dls_solve(target: Pose, q0: Vec, arm: ArmParams, pos_tol: float, ang_tol: float, max_iter: int) -> IKResult:
    q = arm.clip(q0)
    lam = 0.02
    frames = fk_frames(q, arm.dh)
    e = pose_residual(Pose.from_homogeneous(frames[-1]), target)
    err = float(e @ e)
    for it in range(max_iter + 1):
        pe, ae = float(np.linalg.norm(e[:3])), float(np.linalg.norm(e[3:]))
        if pe < pos_tol and ae < ang_tol:
            return IKResult(q, True, pe, ae, it)
        if it == max_iter:
            break
        J = jacobian(q, arm.dh)
        # shrink the orientation residual's weight so metres and radians trade evenly
        W = np.array([1.0, 1.0, 1.0, 0.3, 0.3, 0.3])
        Jw = J * W[:, None]
        dq = Jw.T @ np.linalg.solve(Jw @ Jw.T + lam**2 * np.eye(6), e * W)
        step = float(np.linalg.norm(dq))
        if step > 0.5:
            dq *= 0.5 / step
        q_new = arm.clip(q + dq)
        e_new = pose_residual(forward_kinematics(q_new, arm.dh), target)
        err_new = float(e_new @ e_new)
        if err_new < err:
            q, e, err = q_new, e_new, err_new
            lam = max(lam * 0.5, 1e-4)
        else:
            lam = min(lam * 4.0, 1.0)
            if lam >= 1.0 and step < 1e-9:
                break
    return IKResult(q, False, float(np.linalg.norm(e[:3])), float(np.linalg.norm(e[3:])), it)


def inverse_kinematics(
    target: Pose,
    seed: ArrayLike,
    arm: ArmParams,
    pos_tol: float = 1e-4,
    ang_tol: float = 1e-3,
    max_iter: int = 150,
    restarts: int = 6,
) -> IKResult:
    """Damped least-squares IK on the 6-D pose residual.

    Tries the seed first, then a fixed sequence of restart configurations so
    the result is a pure function of the inputs. Targets beyond the arm's
    reach fail immediately.
    """
    seed = np.asarray(seed, dtype=float)
    if np.linalg.norm(target.position) > arm.reach:
        cur = forward_kinematics(arm.clip(seed), arm.dh)
        e = pose_residual(cur, target)
        return IKResult(arm.clip(seed), False, float(np.linalg.norm(e[:3])), float(np.linalg.norm(e[3:])), 0)
    best = _dls_solve(target, seed, arm, pos_tol, ang_tol, max_iter)
    if best.success:
        return best
    rng = np.random.default_rng(12345)
    lo, hi = arm.joint_limits[:, 0], arm.joint_limits[:, 1]
    for _ in range(restarts):
        q0 = rng.uniform(lo, hi)
        res = _dls_solve(target, q0, arm, pos_tol, ang_tol, max_iter)
        if res.success:
            return replace(res, iterations=res.iterations + best.iterations)
        if res.position_error + res.angle_error < best.position_error + best.angle_error:
            best = res
    return best


# ---------------------------------------------------------------------------
# joint servo


@dataclass(frozen=True)
class JointGains:
    # the kinematic joint already integrates velocity, so no integral action is needed by default
    kp: float = 6.0
    ki: float = 0.0
    kd: float = 0.0
    int_limit: float = 0.2


@dataclass(frozen=True, eq=False)
class ManipulatorState:
    q: Vec
    qd: Vec = field(default_factory=lambda: np.zeros(6))
    limits: Vec = field(default_factory=lambda: DEFAULT_LIMITS.copy())
    gripper: str = "open"
    integral: Vec = field(default_factory=lambda: np.zeros(6))
    prev_error: Vec = field(default_factory=lambda: np.zeros(6))

    def __post_init__(self) -> None:
        if self.gripper not in ("open", "closed", "holding"):
            raise ValueError(f"unknown gripper state {self.gripper!r}")
        lim = np.asarray(self.limits, dtype=float)
        object.__setattr__(self, "limits", lim)
        object.__setattr__(self, "q", np.clip(np.asarray(self.q, dtype=float), lim[:, 0], lim[:, 1]))


def joint_servo_step(
    q_des: ArrayLike,
    state: ManipulatorState,
    gains: JointGains,
    rate_limits: ArrayLike,
    dt: float,
) -> ManipulatorState:
    """Per-joint PID on angle error -> rate-limited joint velocity -> integrate and clamp."""
    lo, hi = state.limits[:, 0], state.limits[:, 1]
    q_des = np.clip(np.asarray(q_des, dtype=float), lo, hi)
    e = q_des - state.q
    if not np.any(e) and not np.any(state.integral):
        return replace(state, qd=np.zeros(6), prev_error=e)
    rl = np.asarray(rate_limits, dtype=float)
    d = gains.kd * (e - state.prev_error) / dt
    # conditional integration: joints already at their rate limit do not wind up
    free = np.abs(gains.kp * e + gains.ki * state.integral + d) < rl
    integral = np.where(free, np.clip(state.integral + e * dt, -gains.int_limit, gains.int_limit), state.integral)
    v = np.clip(gains.kp * e + gains.ki * integral + d, -rl, rl)
    q = np.clip(state.q + v * dt, lo, hi)
    return replace(state, q=q, qd=(q - state.q) / dt, integral=integral, prev_error=e)


# ---------------------------------------------------------------------------
# coupling with the airframe


def arm_com(q: ArrayLike, arm: ArmParams) -> Vec:
    """Arm center of mass in the vehicle body frame; each link mass sits mid-link."""
    frames = fk_frames(q, arm.dh)
    origins = np.array([T[:3, 3] for T in frames])
    mids = 0.5 * (origins[:-1] + origins[1:])
    c = (arm.link_masses[:, None] * mids).sum(axis=0) / arm.mass
    return arm.mount.apply(c)


def coupling_wrench(com_history: ArrayLike, dt: float, arm_mass: float) -> Wrench:
    """Quasi-static reaction of the arm on the base.

    ``com_history`` holds the last three arm CoM positions (body frame, oldest
    first); the CoM acceleration is their second difference.
    """
    c = np.asarray(com_history, dtype=float)
    acc = (c[2] - 2.0 * c[1] + c[0]) / (dt * dt)
    force = -arm_mass * acc
    return Wrench(force, np.cross(c[2], force))


def camera_pose_in_base(q: ArrayLike, arm: ArmParams) -> Pose:
    """End-effector camera pose in the vehicle body frame."""
    return arm.mount.compose(forward_kinematics(q, arm.dh)).compose(arm.camera_mount)


def gripper_pose_in_base(q: ArrayLike, arm: ArmParams) -> Pose:
    return arm.mount.compose(forward_kinematics(q, arm.dh))

