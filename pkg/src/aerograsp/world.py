"""World geometry: static boxes, walking pedestrians, landmarks and the grasp target.

All queries are pure functions of the immutable world description and a time
stamp, so they can be shared freely between the sensors and the evaluators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import Pose

WALL_THICKNESS = 0.2


class HitClass(IntEnum):
    NONE = 0
    STATIC = 1
    MOVING = 2
    GROUND = 3
    TARGET = 4

    @property
    def label(self) -> str:
        return self.name.lower()


def _vec3(v: ArrayLike, name: str) -> NDArray[np.float64]:
    a = np.array(v, dtype=float).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be a finite 3-vector, got {v!r}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BoxObstacle:
    center: NDArray[np.float64]
    half_extents: NDArray[np.float64]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _vec3(self.center, "box center"))
        object.__setattr__(self, "half_extents", _vec3(self.half_extents, "box half_extents"))
        if np.any(self.half_extents <= 0.0):
            raise ValueError("box half_extents must be componentwise > 0")
        object.__setattr__(self, "yaw", float(self.yaw))

    def signed_distance(self, points: ArrayLike) -> NDArray[np.float64]:
        p = np.atleast_2d(np.asarray(points, dtype=float)) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.column_stack((c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]))
        q = np.abs(local) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


@dataclass(frozen=True, eq=False)
class Pedestrian:
    """A vertical cylinder walking a waypoint polyline at constant speed."""

    waypoints: NDArray[np.float64]
    speed: float
    radius: float
    height: float
    loop: bool = True

    def __post_init__(self) -> None:
        wp = np.array(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) < 2:
            raise ValueError("pedestrian needs >= 2 waypoints of 3 coordinates")
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        if np.any(seg <= 0.0):
            raise ValueError("consecutive pedestrian waypoints must be distinct")
        for name in ("speed", "radius", "height"):
            if not float(getattr(self, name)) > 0.0:
                raise ValueError(f"pedestrian {name} must be > 0")
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "loop", bool(self.loop))

    @property
    def path(self) -> NDArray[np.float64]:
        """Vertices actually walked; a looped path closes back to the first waypoint."""
        wp = self.waypoints
        if self.loop and np.linalg.norm(wp[-1] - wp[0]) > 0.0:
            return np.vstack((wp, wp[:1]))
        return wp

    @property
    def total_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.path, axis=0), axis=1).sum())


def pedestrian_pose_at(p: Pedestrian, t: float) -> Pose:
    path = p.path
    seg_vec = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg_vec, axis=1)
    total = float(seg_len.sum())
    s = p.speed * max(t, 0.0)
    if p.loop:
        s = math.fmod(s, total)
    elif s >= total:
        d = seg_vec[-1]
        return Pose.from_yaw(path[-1], math.atan2(d[1], d[0]))
    cum = np.concatenate(([0.0], np.cumsum(seg_len)))
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(max(i, 0), len(seg_len) - 1)
    frac = (s - cum[i]) / seg_len[i]
    pos = path[i] + frac * seg_vec[i]
    return Pose.from_yaw(pos, math.atan2(seg_vec[i][1], seg_vec[i][0]))


@dataclass(frozen=True, eq=False)
class TargetObject:
    """Upright cylinder with a square marker on its forward face.

    The target frame has its origin at the cylinder center, local z along the
    cylinder axis and local +x pointing out of the marker.
    """

    pose: Pose
    radius: float
    height: float
    marker_half_size: float

    def __post_init__(self) -> None:
        for name in ("radius", "height", "marker_half_size"):
            if not float(getattr(self, name)) > 0.0:
                raise ValueError(f"target {name} must be > 0")
        if self.marker_half_size >= 0.5 * self.height:
            raise ValueError("marker must fit on the cylinder face")

    @property
    def marker_pose(self) -> Pose:
        """Marker frame: origin at the marker center, x/y along the image axes of an
        upright camera facing the marker, z pointing into the face."""
        # columns: marker x = target +y, marker y = target -z, marker z = target -x
        R_local = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        local = Pose.from_matrix(R_local, [self.radius, 0.0, 0.0])
        return self.pose.compose(local)

    def marker_corners_local(self) -> NDArray[np.float64]:
        """Corners in marker frame, ordered top-left, top-right, bottom-right, bottom-left
        as seen by a camera looking at the marker face."""
        h = self.marker_half_size
        return np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])

    def marker_corners(self) -> NDArray[np.float64]:
        return self.marker_pose.apply(self.marker_corners_local())

    @property
    def marker_normal(self) -> NDArray[np.float64]:
        return self.pose.rotation[:, 0]

    @property
    def grasp_point(self) -> NDArray[np.float64]:
        return np.array(self.pose.position)

    @property
    def grasp_axis(self) -> NDArray[np.float64]:
        """Approach direction for a grasp: into the marker face."""
        return -self.marker_normal


@dataclass(frozen=True, eq=False)
class Landmark:
    id: int
    position: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "position", _vec3(self.position, f"landmark {self.id}"))


@dataclass(frozen=True, eq=False)
class Region:
    """Ball-shaped goal set, membership ``f(x) = |x - c|^2 - r^2 <= 0``."""

    center: NDArray[np.float64]
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", _vec3(self.center, "region center"))
        if not float(self.radius) > 0.0:
            raise ValueError("region radius must be > 0")
        object.__setattr__(self, "radius", float(self.radius))

    def f(self, x: ArrayLike) -> float:
        d = np.asarray(x, dtype=float) - self.center
        return float(d @ d) - self.radius**2

    def gradient(self, x: ArrayLike) -> NDArray[np.float64]:
        return 2.0 * (np.asarray(x, dtype=float) - self.center)

    def contains(self, x: ArrayLike) -> bool:
        return self.f(x) <= 0.0


@dataclass(frozen=True, eq=False)
class Bounds:
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", _vec3(self.lo, "bounds min"))
        object.__setattr__(self, "hi", _vec3(self.hi, "bounds max"))
        if np.any(self.hi <= self.lo):
            raise ValueError("world bounds max must exceed min on every axis")

    def contains(self, x: ArrayLike) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    @property
    def size(self) -> NDArray[np.float64]:
        return self.hi - self.lo


def wall_boxes(bounds: Bounds) -> list[BoxObstacle]:
    """Four wall slabs whose inner faces lie on the horizontal bounds."""
    lo, hi = bounds.lo, bounds.hi
    t = WALL_THICKNESS
    zc, zh = 0.5 * (lo[2] + hi[2]), 0.5 * (hi[2] - lo[2])
    xc, yc = 0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])
    xh, yh = 0.5 * (hi[0] - lo[0]) + t, 0.5 * (hi[1] - lo[1]) + t
    return [
        BoxObstacle([lo[0] - 0.5 * t, yc, zc], [0.5 * t, yh, zh]),
        BoxObstacle([hi[0] + 0.5 * t, yc, zc], [0.5 * t, yh, zh]),
        BoxObstacle([xc, lo[1] - 0.5 * t, zc], [xh, 0.5 * t, zh]),
        BoxObstacle([xc, hi[1] + 0.5 * t, zc], [xh, 0.5 * t, zh]),
    ]


@dataclass(frozen=True, eq=False)
class World:
    """Geometry-only view of a scenario, with box arrays packed for ray casting."""

    bounds: Bounds
    boxes: tuple[BoxObstacle, ...]
    pedestrians: tuple[Pedestrian, ...]
    landmarks: tuple[Landmark, ...]
    target: TargetObject
    _packed: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        solids = list(self.boxes) + wall_boxes(self.bounds)
        packed = {
            "centers": np.array([b.center for b in solids]).reshape(-1, 3),
            "half": np.array([b.half_extents for b in solids]).reshape(-1, 3),
            "cos": np.array([math.cos(b.yaw) for b in solids]),
            "sin": np.array([math.sin(b.yaw) for b in solids]),
        }
        object.__setattr__(self, "_packed", packed)

    @property
    def solids(self) -> list[BoxObstacle]:
        return list(self.boxes) + wall_boxes(self.bounds)

    def pedestrian_positions(self, t: float) -> NDArray[np.float64]:
        return np.array([pedestrian_pose_at(p, t).position for p in self.pedestrians]).reshape(-1, 3)


def _box_sdf_packed(world: World, pts: NDArray[np.float64]) -> NDArray[np.float64]:
    pk = world._packed
    d = pts[:, None, :] - pk["centers"][None, :, :]
    c, s = pk["cos"][None, :], pk["sin"][None, :]
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    q = np.stack((np.abs(lx), np.abs(ly), np.abs(d[..., 2])), axis=-1) - pk["half"][None, :, :]
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return (outside + inside).min(axis=1)


def _target_sdf(target: TargetObject, pts: NDArray[np.float64]) -> NDArray[np.float64]:
    local = target.pose.apply_inverse(pts)
    dr = np.hypot(local[:, 0], local[:, 1]) - target.radius
    dz = np.abs(local[:, 2]) - 0.5 * target.height
    q = np.column_stack((dr, dz))
    return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)


def static_distance(world: World, point: ArrayLike, include_target: bool = False) -> float | NDArray[np.float64]:
    """Signed distance to the nearest static surface (boxes, walls, ground plane).

    Accepts a single point or an (n, 3) array.
    """
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = np.minimum(_box_sdf_packed(world, pts), pts[:, 2])
    if include_target:
        d = np.minimum(d, _target_sdf(world.target, pts))
    return float(d[0]) if single else d


# ---------------------------------------------------------------------------
# ray casting


@numba.njit(cache=True)
def _ray_boxes_kernel(o, d, centers, half, cosy, siny):
    n = d.shape[0]
    best = np.full(n, np.inf)
    for i in range(n):
        for b in range(centers.shape[0]):
            rx, ry, rz = o[i, 0] - centers[b, 0], o[i, 1] - centers[b, 1], o[i, 2] - centers[b, 2]
            c, s = cosy[b], siny[b]
            lo = (c * rx + s * ry, -s * rx + c * ry, rz)
            ld = (c * d[i, 0] + s * d[i, 1], -s * d[i, 0] + c * d[i, 1], d[i, 2])
            enter, leave = -np.inf, np.inf
            for k in range(3):
                h = half[b, k]
                if ld[k] == 0.0:
                    # parallel to this slab: inside -> unbounded, outside -> miss
                    if abs(lo[k]) > h:
                        enter, leave = np.inf, -np.inf
                        break
                    continue
                t1 = (-h - lo[k]) / ld[k]
                t2 = (h - lo[k]) / ld[k]
                if t1 > t2:
                    t1, t2 = t2, t1
                enter = max(enter, t1)
                leave = min(leave, t2)
            if enter <= leave and leave >= 0.0:
                t = max(enter, 0.0)
                if t < best[i]:
                    best[i] = t
    return best


def _ray_boxes(world: World, o: NDArray, d: NDArray) -> NDArray[np.float64]:
    pk = world._packed
    return _ray_boxes_kernel(
        np.ascontiguousarray(o), np.ascontiguousarray(d), pk["centers"], pk["half"], pk["cos"], pk["sin"]
    )


@numba.njit(cache=True)
def _ray_cylinder_kernel(o, d, cx, cy, r, z0, z1):
    n = d.shape[0]
    out = np.full(n, np.inf)
    for i in range(n):
        ox, oy, oz = o[i, 0] - cx, o[i, 1] - cy, o[i, 2]
        dx, dy, dz = d[i, 0], d[i, 1], d[i, 2]
        c = ox * ox + oy * oy - r * r
        if c <= 0.0 and z0 <= oz <= z1:
            out[i] = 0.0
            continue
        best = np.inf
        a = dx * dx + dy * dy
        if a > 1e-15:
            b = ox * dx + oy * dy
            disc = b * b - a * c
            if disc >= 0.0:
                t_in = (-b - math.sqrt(disc)) / a
                z_in = oz + t_in * dz
                if t_in >= 0.0 and z0 <= z_in <= z1:
                    best = t_in
        if dz != 0.0:
            for zc in (z0, z1):
                tc = (zc - oz) / dz
                px, py = ox + tc * dx, oy + tc * dy
                if tc >= 0.0 and px * px + py * py <= r * r and tc < best:
                    best = tc
        out[i] = best
    return out


def _ray_vertical_cylinder(
    o: NDArray, d: NDArray, cx: float, cy: float, r: float, z0: float, z1: float
) -> NDArray[np.float64]:
    return _ray_cylinder_kernel(
        np.ascontiguousarray(o, dtype=np.float64), np.ascontiguousarray(d, dtype=np.float64),
        float(cx), float(cy), float(r), float(z0), float(z1),
    )


def _ray_target(target: TargetObject, o: NDArray, d: NDArray) -> NDArray[np.float64]:
    lo_ = target.pose.apply_inverse(o)
    ld = d @ target.pose.rotation
    hz = 0.5 * target.height
    t = _ray_vertical_cylinder(lo_, ld, 0.0, 0.0, target.radius, -hz, hz)
    # marker plane x = radius, square |y|,|z| <= h
    h = target.marker_half_size
    with np.errstate(divide="ignore", invalid="ignore"):
        tm = (target.radius - lo_[:, 0]) / ld[:, 0]
        py = lo_[:, 1] + tm * ld[:, 1]
        pz = lo_[:, 2] + tm * ld[:, 2]
    on = (tm >= 0.0) & (np.abs(py) <= h) & (np.abs(pz) <= h)
    return np.where(on & (tm < t), tm, t)


def ray_cast_many(
    world: World,
    origins: ArrayLike,
    dirs: ArrayLike,
    max_range: float,
    t: float,
    include_moving: bool = True,
) -> tuple[NDArray[np.float64], NDArray[np.int8]]:
    """Vectorized nearest-hit query.

    Returns (distance, hit class) per ray; rays without a hit inside
    ``max_range`` get ``inf`` and ``HitClass.NONE``.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=float))
    o = np.broadcast_to(np.asarray(origins, dtype=float), d.shape)
    n = len(d)
    dist = np.full(n, np.inf)
    cls = np.zeros(n, dtype=np.int8)

    def take(tc: NDArray, label: HitClass) -> None:
        nonlocal dist
        better = tc < dist
        dist = np.where(better, tc, dist)
        cls[better] = int(label)

    take(_ray_boxes(world, o, d), HitClass.STATIC)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(d[:, 2] < 0.0, -o[:, 2] / d[:, 2], np.inf)
    take(np.where(tg >= 0.0, tg, np.inf), HitClass.GROUND)
    take(_ray_target(world.target, o, d), HitClass.TARGET)
    if include_moving:
        for ped in world.pedestrians:
            c = pedestrian_pose_at(ped, t).position
            take(_ray_vertical_cylinder(o, d, c[0], c[1], ped.radius, c[2], c[2] + ped.height), HitClass.MOVING)
    miss = dist > max_range
    dist[miss] = np.inf
    cls[miss] = int(HitClass.NONE)
    return dist, cls


def ray_cast(
    world: World, origin: ArrayLike, direction: ArrayLike, max_range: float, t: float
) -> tuple[float, HitClass] | None:
    d = np.asarray(direction, dtype=float)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-6:
        raise ValueError("ray direction must be a unit vector")
    if not max_range > 0.0:
        raise ValueError("max_range must be > 0")
    dist, cls = ray_cast_many(world, np.asarray(origin, dtype=float)[None, :], d[None, :], max_range, t)
    if not np.isfinite(dist[0]):
        return None
    return float(dist[0]), HitClass(int(cls[0]))
