"""Rigid-transform primitives.

Quaternions are stored scalar-first, ``[w, x, y, z]``. Frames follow the
x-forward / y-left / z-up convention; Euler angles are intrinsic Z-Y-X
(yaw, then pitch about the new y, then roll about the new x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

Vec = NDArray[np.float64]


def quat_mul(a: ArrayLike, b: ArrayLike) -> Vec:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: ArrayLike) -> Vec:
    w, x, y, z = q
    return np.array([w, -x, -y, -z])


def quat_normalize(q: ArrayLike) -> Vec:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if n == 0.0:
        raise ValueError("zero-norm quaternion")
    q = q / n
    # canonical hemisphere keeps serialization stable
    return q if q[0] >= 0.0 else -q


def quat_to_matrix(q: ArrayLike) -> NDArray[np.float64]:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: ArrayLike) -> Vec:
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_rotvec(rv: ArrayLike) -> Vec:
    rv = np.asarray(rv, dtype=float)
    angle = math.sqrt(float(rv @ rv))
    if angle < 1e-12:
        return quat_normalize([1.0, 0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2]])
    axis = rv / angle
    s = math.sin(0.5 * angle)
    return np.array([math.cos(0.5 * angle), axis[0] * s, axis[1] * s, axis[2] * s])


def rotvec_from_matrix(R: ArrayLike) -> Vec:
    """Logarithm map SO(3) -> rotation vector, stable near 0 and pi."""
    q = matrix_to_quat(R)
    v = q[1:]
    s = math.sqrt(float(v @ v))
    if s < 1e-12:
        return 2.0 * v
    angle = 2.0 * math.atan2(s, q[0])
    return v * (angle / s)


def skew(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rot_x(a: float) -> NDArray[np.float64]:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> NDArray[np.float64]:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> NDArray[np.float64]:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> NDArray[np.float64]:
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def matrix_to_euler(R: ArrayLike) -> tuple[float, float, float]:
    """Return (roll, pitch, yaw) for ``R = Rz(yaw) Ry(pitch) Rx(roll)``.

    Positive pitch tilts the body z-axis toward body +x (nose down).
    """
    R = np.asarray(R, dtype=float)
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping points from the local frame into the parent frame."""

    position: Vec = field(default_factory=lambda: np.zeros(3))
    orientation: Vec = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self) -> None:
        p = np.array(self.position, dtype=float).reshape(3)
        q = quat_normalize(np.array(self.orientation, dtype=float).reshape(4))
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, R: ArrayLike, t: ArrayLike = (0.0, 0.0, 0.0)) -> Pose:
        return cls(np.asarray(t, dtype=float), matrix_to_quat(R))

    @classmethod
    def from_yaw(cls, position: ArrayLike, yaw: float) -> Pose:
        return cls(position, [math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])

    @classmethod
    def from_homogeneous(cls, T: ArrayLike) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls.from_matrix(T[:3, :3], T[:3, 3])

    @property
    def rotation(self) -> NDArray[np.float64]:
        return quat_to_matrix(self.orientation)

    def as_homogeneous(self) -> NDArray[np.float64]:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def compose(self, other: Pose) -> Pose:
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.position + self.rotation @ other.position,
            quat_mul(self.orientation, other.orientation),
        )

    __matmul__ = compose

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(-Rt @ self.position, quat_conj(self.orientation))

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Map local points (shape (3,) or (n, 3)) to the parent frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.position

    def apply_inverse(self, points: ArrayLike) -> NDArray[np.float64]:
        pts = np.asarray(points, dtype=float)
        return (pts - self.position) @ self.rotation

    def euler(self) -> tuple[float, float, float]:
        return matrix_to_euler(self.rotation)

    @property
    def yaw(self) -> float:
        return self.euler()[2]

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        if not np.allclose(self.position, other.position, atol=atol, rtol=0.0):
            return False
        # q and -q encode the same rotation
        d = abs(float(self.orientation @ other.orientation))
        return 1.0 - d <= atol

    def to_list(self) -> list[float]:
        return [float(v) for v in (*self.position, *self.orientation)]

    @classmethod
    def from_list(cls, values: ArrayLike) -> Pose:
        v = np.asarray(values, dtype=float)
        return cls(v[:3], v[3:7])

    def __repr__(self) -> str:
        p = np.array2string(self.position, precision=4)
        q = np.array2string(self.orientation, precision=4)
        return f"Pose(position={p}, orientation={q})"


def pose_error(estimate: Pose, truth: Pose) -> tuple[Vec, Vec]:
    """Absolute per-axis position error and |roll|, |pitch|, |yaw| of the relative rotation."""
    dp = np.abs(estimate.position - truth.position)
    r, p, y = matrix_to_euler(truth.rotation.T @ estimate.rotation)
    return dp, np.abs(np.array([r, p, y]))
