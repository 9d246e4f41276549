"""Octocopter rigid-body plant, rotor allocation and the cascade PID flight controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import Pose, quat_mul, quat_to_matrix

Vec = NDArray[np.float64]


class SimulationFault(RuntimeError):
    """Raised when the plant state stops being finite."""


def x8_coaxial_layout(arm_length: float, rotor_gap: float) -> tuple[NDArray, NDArray]:
    """Rotor positions and spin signs for a coaxial X8 frame.

    Four booms at 45, 135, 225 and 315 degrees each carry an upper and a lower
    rotor spinning in opposite directions.
    """
    pos, spin = [], []
    for k in range(4):
        a = math.pi / 4 + k * math.pi / 2
        x, y = arm_length * math.cos(a), arm_length * math.sin(a)
        upper = 1.0 if k % 2 == 0 else -1.0
        pos += [[x, y, 0.5 * rotor_gap], [x, y, -0.5 * rotor_gap]]
        spin += [upper, -upper]
    return np.array(pos), np.array(spin)


@dataclass(frozen=True, eq=False)
class VehicleParams:
    mass: float = 4.0
    inertia: Vec = field(default_factory=lambda: np.diag([0.08, 0.08, 0.14]))
    rotor_positions: Vec = field(default_factory=lambda: x8_coaxial_layout(0.32, 0.08)[0])
    # sign of the yaw reaction moment produced by each rotor's thrust
    rotor_spins: Vec = field(default_factory=lambda: x8_coaxial_layout(0.32, 0.08)[1])
    thrust_limit: float = 12.0
    torque_coefficient: float = 0.016
    gravity: float = 9.81

    def __post_init__(self) -> None:
        inertia = np.array(self.inertia, dtype=float)
        if inertia.shape == (3,):
            inertia = np.diag(inertia)
        pos = np.array(self.rotor_positions, dtype=float)
        spins = np.array(self.rotor_spins, dtype=float)
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T):
            raise ValueError("inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(inertia) <= 0.0):
            raise ValueError("inertia must be positive definite")
        if pos.shape != (8, 3) or spins.shape != (8,):
            raise ValueError("an octocopter needs 8 rotor positions and 8 spin signs")
        if sorted(spins.tolist()) != [-1.0] * 4 + [1.0] * 4:
            raise ValueError("four rotors must spin each way")
        if self.mass <= 0 or self.thrust_limit <= 0 or self.gravity <= 0:
            raise ValueError("mass, thrust_limit and gravity must be > 0")
        for name, v in (("inertia", inertia), ("rotor_positions", pos), ("rotor_spins", spins)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        mix = self._mixing()
        object.__setattr__(self, "_mix", mix)
        object.__setattr__(self, "_mix_pinv", np.linalg.pinv(mix))
        object.__setattr__(self, "_inertia_inv", np.linalg.inv(inertia))

    def _mixing(self) -> Vec:
        x, y = self.rotor_positions[:, 0], self.rotor_positions[:, 1]
        return np.vstack((np.ones(8), y, -x, self.torque_coefficient * self.rotor_spins))

    @property
    def mixing_matrix(self) -> Vec:
        """4x8 map from rotor thrusts to (collective thrust, roll, pitch, yaw moments)."""
        return self._mix

    @property
    def inertia_inv(self) -> Vec:
        return self._inertia_inv

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


@dataclass(frozen=True)
class WrenchCommand:
    thrust: float
    moments: Vec = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        if not self.thrust >= 0.0:
            raise ValueError("thrust must be >= 0")
        object.__setattr__(self, "moments", np.asarray(self.moments, dtype=float).reshape(3))

    def as_vector(self) -> Vec:
        return np.array([self.thrust, *self.moments])


@dataclass(frozen=True)
class Wrench:
    """External force and moment on the base, both in body frame."""

    force: Vec = field(default_factory=lambda: np.zeros(3))
    moment: Vec = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True, eq=False)
class RigidBodyState:
    position: Vec = field(default_factory=lambda: np.zeros(3))
    orientation: Vec = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    velocity: Vec = field(default_factory=lambda: np.zeros(3))  # world frame
    angular_velocity: Vec = field(default_factory=lambda: np.zeros(3))  # body frame

    @property
    def pose(self) -> Pose:
        return Pose(self.position, self.orientation)

    @property
    def rotation(self) -> Vec:
        return quat_to_matrix(self.orientation)

    @classmethod
    def at(cls, position: ArrayLike, yaw: float = 0.0) -> RigidBodyState:
        p = Pose.from_yaw(position, yaw)
        return cls(np.array(p.position), np.array(p.orientation))


def step_dynamics(
    state: RigidBodyState,
    cmd: WrenchCommand,
    params: VehicleParams,
    dt: float,
    disturbance: Wrench | None = None,
) -> RigidBodyState:
    """Semi-implicit Euler step of the Newton-Euler equations."""
    if not 0.0 < dt <= 0.05:
        raise ValueError("dt must lie in (0, 0.05]")
    R = quat_to_matrix(state.orientation)
    force_b = np.array([0.0, 0.0, cmd.thrust])
    moment = np.asarray(cmd.moments, dtype=float)
    if disturbance is not None:
        force_b = force_b + disturbance.force
        moment = moment + disturbance.moment
    acc = R @ force_b / params.mass
    acc[2] -= params.gravity
    w = state.angular_velocity
    I = params.inertia
    w_dot = params.inertia_inv @ (moment - np.cross(w, I @ w))

    v = state.velocity + acc * dt
    w_new = w + w_dot * dt
    p = state.position + v * dt
    angle = math.sqrt(float(w_new @ w_new)) * dt
    if angle > 0.0:
        axis = w_new * (dt / angle)
        half = 0.5 * angle
        dq = np.array([math.cos(half), *(math.sin(half) * axis)])
        q = quat_mul(state.orientation, dq)
    else:
        q = np.array(state.orientation, dtype=float)
    q = q / math.sqrt(float(q @ q))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v)) and np.all(np.isfinite(q)) and np.all(np.isfinite(w_new))):
        raise SimulationFault("non-finite vehicle state")
    return RigidBodyState(p, q, v, w_new)


def allocate_rotors(cmd: WrenchCommand, params: VehicleParams) -> tuple[Vec, bool]:
    """Minimum-norm rotor thrusts for the commanded wrench, clamped to [0, limit]."""
    f = params._mix_pinv @ cmd.as_vector()
    clamped = np.clip(f, 0.0, params.thrust_limit)
    return clamped, bool(np.any(clamped != f))


def wrench_from_rotors(thrusts: ArrayLike, params: VehicleParams) -> WrenchCommand:
    w = params.mixing_matrix @ np.asarray(thrusts, dtype=float)
    return WrenchCommand(max(float(w[0]), 0.0), w[1:])


# ---------------------------------------------------------------------------
# cascade PID


@dataclass(frozen=True)
class CascadeGains:
    pos_kp: Vec = field(default_factory=lambda: np.array([4.0, 4.0, 5.0]))
    pos_ki: Vec = field(default_factory=lambda: np.array([1.0, 1.0, 1.5]))
    pos_kd: Vec = field(default_factory=lambda: np.array([4.0, 4.0, 4.5]))
    pos_int_limit: float = 0.5
    max_horizontal_acc: float = 4.0
    max_vertical_acc: float = 4.0
    max_tilt: float = 0.45
    att_kp: Vec = field(default_factory=lambda: np.array([7.0, 7.0, 3.0]))
    rate_kp: Vec = field(default_factory=lambda: np.array([18.0, 18.0, 8.0]))
    rate_ki: Vec = field(default_factory=lambda: np.array([2.0, 2.0, 1.0]))
    rate_kd: Vec = field(default_factory=lambda: np.zeros(3))
    rate_int_limit: float = 0.3

    def __post_init__(self) -> None:
        for f in ("pos_kp", "pos_ki", "pos_kd", "att_kp", "rate_kp", "rate_ki", "rate_kd"):
            v = np.asarray(getattr(self, f), dtype=float).reshape(3)
            if np.any(v < 0.0):
                raise ValueError(f"gain {f} must be non-negative")
            object.__setattr__(self, f, v)
        if np.any(self.pos_kp <= 0.0) or np.any(self.att_kp <= 0.0) or np.any(self.rate_kp <= 0.0):
            raise ValueError("proportional gains must be positive")


@dataclass(frozen=True)
class Setpoint:
    position: Vec
    yaw: float = 0.0
    velocity: Vec = field(default_factory=lambda: np.zeros(3))
    acceleration: Vec = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class ControllerState:
    pos_integral: Vec = field(default_factory=lambda: np.zeros(3))
    rate_integral: Vec = field(default_factory=lambda: np.zeros(3))
    prev_rate_error: Vec = field(default_factory=lambda: np.zeros(3))
    desired_attitude: Vec = field(default_factory=lambda: np.eye(3))


def _vee(M: Vec) -> Vec:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def desired_attitude(thrust_dir: Vec, yaw: float) -> Vec:
    z = thrust_dir
    xc = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    y = np.cross(z, xc)
    ny = np.linalg.norm(y)
    if ny < 1e-9:
        y = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
    else:
        y = y / ny
    x = np.cross(y, z)
    return np.column_stack((x, y, z))


def cascade_pid_step(
    setpoint: Setpoint,
    state: RigidBodyState,
    gains: CascadeGains,
    params: VehicleParams,
    dt: float,
    ctrl: ControllerState | None = None,
) -> tuple[WrenchCommand, ControllerState]:
    """Position PID -> thrust vector -> attitude P -> body-rate PID -> moments.

    Returns the wrench and the updated integrator state. The desired attitude
    rotates the thrust axis toward the desired acceleration, so a setpoint
    ahead in +x yields a positive pitch (nose down about body +y).
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    ctrl = ctrl or ControllerState()
    m, g = params.mass, params.gravity

    e_p = np.asarray(setpoint.position, dtype=float) - state.position
    e_v = np.asarray(setpoint.velocity, dtype=float) - state.velocity
    lim = gains.pos_int_limit
    # integrate only near a resting setpoint so tracking lag does not wind up
    resting = float(np.linalg.norm(setpoint.velocity)) < 0.05
    grow = np.where(np.abs(e_p) < 0.3, e_p, 0.0) if resting else np.zeros(3)
    pos_int = np.clip(ctrl.pos_integral + grow * dt, -lim, lim)
    a = gains.pos_kp * e_p + gains.pos_kd * e_v + gains.pos_ki * pos_int + setpoint.acceleration
    h = math.hypot(a[0], a[1])
    if h > gains.max_horizontal_acc:
        a[:2] *= gains.max_horizontal_acc / h
    a[2] = min(max(a[2], -0.8 * g), gains.max_vertical_acc)

    F = m * np.array([a[0], a[1], a[2] + g])
    # tilt limit: shrink the horizontal part, keep the vertical part
    fh = math.hypot(F[0], F[1])
    max_h = F[2] * math.tan(gains.max_tilt)
    if fh > max_h:
        F[:2] *= max_h / fh
    z_d = F / np.linalg.norm(F)
    R_d = desired_attitude(z_d, setpoint.yaw)

    R = quat_to_matrix(state.orientation)
    thrust = max(float(F @ R[:, 2]), 0.0)

    e_R = 0.5 * _vee(R_d.T @ R - R.T @ R_d)
    w_des = -gains.att_kp * e_R
    w = state.angular_velocity
    e_w = w_des - w
    rl = gains.rate_int_limit
    rate_int = np.clip(ctrl.rate_integral + e_w * dt, -rl, rl)
    de = (e_w - ctrl.prev_rate_error) / dt
    alpha = gains.rate_kp * e_w + gains.rate_ki * rate_int + gains.rate_kd * de
    I = params.inertia
    tau = I @ alpha + np.cross(w, I @ w)
    return WrenchCommand(thrust, tau), ControllerState(pos_int, rate_int, e_w, R_d)
