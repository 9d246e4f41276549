"""Simulated base RGBD camera and end-effector marker camera.

Camera frames are optical: z along the viewing axis, x to the right of the
image and y down. Ground-truth hit classes stand in for a learned detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

from .geometry import Pose
from .world import HitClass, World, pedestrian_pose_at, ray_cast_many

Vec = NDArray[np.float64]


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 79.5
    cy: float = 59.5
    min_range: float = 0.3
    max_range: float = 8.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be > 0")
        if not 0.0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have at least one pixel")

    def project(self, p_cam: Vec) -> Vec:
        p = np.atleast_2d(p_cam)
        return np.column_stack((self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy))

    def in_image(self, uv: Vec) -> NDArray[np.bool_]:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= -0.5) & (uv[:, 0] <= self.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= self.height - 0.5)


@lru_cache(maxsize=8)
def _pixel_rays(intr: CameraIntrinsics) -> tuple[Vec, Vec]:
    """Unit ray directions (camera frame) and their z-components, row-major."""
    u, v = np.meshgrid(np.arange(intr.width, dtype=float), np.arange(intr.height, dtype=float))
    rays = np.stack(((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)), axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(rays, axis=1)
    unit = rays / norms[:, None]
    unit.setflags(write=False)
    cosz = unit[:, 2].copy()
    cosz.setflags(write=False)
    return unit, cosz


def pixel_rays(intr: CameraIntrinsics) -> Vec:
    return _pixel_rays(intr)[0]


@dataclass(frozen=True, eq=False)
class DepthImage:
    depth: Vec  # (h, w) z-depth in metres, 0 = invalid
    classes: NDArray[np.int8]  # HitClass per pixel
    instance: NDArray[np.int16]  # pedestrian index per pixel, -1 elsewhere
    timestamp: float

    @property
    def valid(self) -> NDArray[np.bool_]:
        return self.depth > 0.0


def render_depth(
    world: World,
    camera: Pose,
    intr: CameraIntrinsics,
    t: float,
    sigma: float,
    rng: np.random.Generator,
) -> DepthImage:
    if sigma < 0.0:
        raise ValueError("depth noise must be >= 0")
    rays, cosz = _pixel_rays(intr)
    dirs = rays @ camera.rotation.T
    # a z-depth of max_range can sit at ray length max_range / cos
    dist, cls = ray_cast_many(world, camera.position, dirs, intr.max_range / float(cosz.min()), t)
    depth = dist * cosz
    noise = rng.standard_normal(len(depth))
    hit = np.isfinite(depth)
    if sigma > 0.0:
        depth = np.where(hit, depth + sigma * noise, depth)
    valid = hit & (depth >= intr.min_range) & (depth <= intr.max_range)
    depth = np.where(valid, depth, 0.0)
    cls = np.where(valid, cls, int(HitClass.NONE)).astype(np.int8)

    instance = np.full(len(depth), -1, dtype=np.int16)
    moving = cls == int(HitClass.MOVING)
    if np.any(moving) and world.pedestrians:
        hits = camera.position + dirs[moving] * (depth[moving] / cosz[moving])[:, None]
        centers = world.pedestrian_positions(t)
        dxy = hits[:, None, :2] - centers[None, :, :2]
        instance[moving] = np.argmin(np.einsum("nkj,nkj->nk", dxy, dxy), axis=1)
    shape = (intr.height, intr.width)
    return DepthImage(depth.reshape(shape), cls.reshape(shape), instance.reshape(shape), float(t))


def apply_detector(img: DepthImage, miss_rate: float, rng: np.random.Generator) -> tuple[DepthImage, set[int]]:
    """Ideal detector with per-pedestrian misses: a missed pedestrian's pixels are
    relabelled static. Returns the relabelled image and the missed indices."""
    present = sorted(int(i) for i in np.unique(img.instance) if i >= 0)
    draws = rng.random(len(present))
    missed = {i for i, u in zip(present, draws) if u < miss_rate}
    if not missed:
        return img, missed
    cls = img.classes.copy()
    mask = np.isin(img.instance, list(missed))
    cls[mask] = int(HitClass.STATIC)
    return DepthImage(img.depth, cls, img.instance, img.timestamp), missed


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: Vec  # (n, 3)
    labels: NDArray[np.int8]  # HitClass
    on_ground: NDArray[np.bool_]
    frame: str = "world"

    def __len__(self) -> int:
        return len(self.points)

    @property
    def moving(self) -> NDArray[np.bool_]:
        return self.labels == int(HitClass.MOVING)

    def subset(self, mask: NDArray[np.bool_]) -> LabeledPointCloud:
        return LabeledPointCloud(self.points[mask], self.labels[mask], self.on_ground[mask], self.frame)

    @classmethod
    def empty(cls, frame: str = "world") -> LabeledPointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int8), np.zeros(0, dtype=bool), frame)


def depth_to_pointcloud(
    img: DepthImage, intr: CameraIntrinsics, camera: Pose, ground_threshold: float = 0.05
) -> LabeledPointCloud:
    h, w = img.depth.shape
    v, u = np.nonzero(img.valid)
    z = img.depth[v, u]
    p_cam = np.column_stack((z * (u - intr.cx) / intr.fx, z * (v - intr.cy) / intr.fy, z))
    pts = camera.apply(p_cam) if len(p_cam) else np.zeros((0, 3))
    return LabeledPointCloud(pts, img.classes[v, u].astype(np.int8), np.abs(pts[:, 2]) < ground_threshold)


# ---------------------------------------------------------------------------
# landmarks


@dataclass(frozen=True, eq=False)
class LandmarkObservation:
    id: int
    point: Vec  # measured position in the camera frame
    dynamic_flag: bool
    # where the feature map places this id; for features riding on a pedestrian
    # it is a stale position recorded when the feature was first mapped
    map_point: Vec = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class DynamicFeatureModel:
    per_pedestrian: int = 6
    age: float = 1.0
    miss_rate: float = 0.0


DYNAMIC_ID_BASE = 100_000


def _in_fov(p_cam: Vec, intr: CameraIntrinsics) -> NDArray[np.bool_]:
    p = np.atleast_2d(p_cam)
    ok = p[:, 2] > intr.min_range
    uv = np.zeros((len(p), 2))
    uv[ok] = intr.project(p[ok])
    return ok & (p[:, 2] <= intr.max_range) & intr.in_image(uv)


def _visible(world: World, camera: Pose, pts: Vec, t: float, slack: float = 0.02) -> NDArray[np.bool_]:
    delta = pts - camera.position
    dist = np.linalg.norm(delta, axis=1)
    dirs = delta / dist[:, None]
    hit, _ = ray_cast_many(world, camera.position, dirs, float(dist.max()) + 1.0, t)
    return hit >= dist - slack


def _pedestrian_features(ped, center: Vec, bearing: float, n: int) -> Vec:
    k = np.arange(n)
    az = bearing + np.radians(-60.0 + 120.0 * (k + 0.5) / n)
    hz = ped.height * (0.2 + 0.7 * ((k * 0.618034) % 1.0))
    return np.column_stack((center[0] + ped.radius * np.cos(az), center[1] + ped.radius * np.sin(az), center[2] + hz))


def observe_landmarks(
    world: World,
    camera: Pose,
    intr: CameraIntrinsics,
    t: float,
    sigma: float,
    rng: np.random.Generator,
    dynamic: DynamicFeatureModel = DynamicFeatureModel(),
) -> list[LandmarkObservation]:
    """Landmark correspondences seen by the base camera.

    Unoccluded landmarks in the field of view come back as noisy camera-frame
    points. Each pedestrian in view additionally contributes features on its
    surface whose map positions are where they were ``dynamic.age`` seconds
    ago; they carry ``dynamic_flag`` unless the detector misses that pedestrian.
    """
    if sigma < 0.0:
        raise ValueError("landmark noise must be >= 0")
    out: list[LandmarkObservation] = []
    if world.landmarks:
        ids = np.array([lm.id for lm in world.landmarks])
        pts = np.array([lm.position for lm in world.landmarks])
        p_cam = camera.apply_inverse(pts)
        cand = _in_fov(p_cam, intr)
        if np.any(cand):
            idx = np.nonzero(cand)[0]
            vis = _visible(world, camera, pts[idx], t)
            idx = idx[vis]
            noise = rng.standard_normal((len(idx), 3)) * sigma
            for j, i in enumerate(idx):
                out.append(LandmarkObservation(int(ids[i]), p_cam[i] + noise[j], False, pts[i].copy()))

    for pi, ped in enumerate(world.pedestrians):
        c = pedestrian_pose_at(ped, t).position
        mid = c + np.array([0.0, 0.0, 0.5 * ped.height])
        if not _in_fov(camera.apply_inverse(mid), intr)[0]:
            continue
        missed = rng.random() < dynamic.miss_rate
        bearing = math.atan2(camera.position[1] - c[1], camera.position[0] - c[0])
        now = _pedestrian_features(ped, c, bearing, dynamic.per_pedestrian)
        then = now - c + pedestrian_pose_at(ped, t - dynamic.age).position
        p_cam = camera.apply_inverse(now)
        ok = _in_fov(p_cam, intr)
        if np.any(ok):
            ok[ok] = _visible(world, camera, now[ok], t)
        noise = rng.standard_normal((len(now), 3)) * sigma
        for k in np.nonzero(ok)[0]:
            fid = DYNAMIC_ID_BASE + 1000 * pi + int(k)
            out.append(LandmarkObservation(fid, p_cam[k] + noise[k], not missed, then[k]))
    return out


# ---------------------------------------------------------------------------
# marker


@dataclass(frozen=True, eq=False)
class FeatureObservation:
    pixels: Vec  # (4, 2) corner pixels, fixed physical corner order
    depths: Vec  # (4,)
    timestamp: float


@dataclass(frozen=True)
class MarkerDetectorParams:
    max_range: float = 2.5
    max_view_angle: float = math.radians(70.0)
    sigma_depth: float = 0.002


def observe_marker(
    world: World,
    camera: Pose,
    intr: CameraIntrinsics,
    t: float,
    sigma_px: float,
    rng: np.random.Generator,
    params: MarkerDetectorParams = MarkerDetectorParams(),
) -> FeatureObservation | None:
    if sigma_px < 0.0:
        raise ValueError("pixel noise must be >= 0")
    target = world.target
    corners = target.marker_corners()
    center = target.marker_pose.position
    to_cam = camera.position - center
    dist = float(np.linalg.norm(to_cam))
    if dist > params.max_range or dist <= 0.0:
        return None
    cos_view = float(target.marker_normal @ to_cam) / dist
    if cos_view < math.cos(params.max_view_angle):
        return None
    p_cam = camera.apply_inverse(corners)
    if np.any(p_cam[:, 2] <= 1e-6):
        return None
    uv = intr.project(p_cam)
    if not np.all(intr.in_image(uv)):
        return None
    if not np.all(_visible(world, camera, corners, t, slack=2e-3)):
        return None
    uv = uv + rng.standard_normal(uv.shape) * sigma_px
    depths = p_cam[:, 2] + rng.standard_normal(4) * params.sigma_depth
    if not np.all(intr.in_image(uv)) or np.any(depths <= 0.0):
        return None
    return FeatureObservation(uv, depths, float(t))
