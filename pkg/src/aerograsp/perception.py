"""Landmark-based localization with dynamic-feature rejection, and moving-obstacle
extraction from labelled point clouds (ground removal, DBSCAN, PCA boxes, tracking)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Pose
from .sensors import LabeledPointCloud, LandmarkObservation

Vec = NDArray[np.float64]


class EstimationError(RuntimeError):
    """Too few or degenerate correspondences to fix a pose."""


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    inliers: int
    residual: float
    timestamp: float = 0.0


def kabsch(source: ArrayLike, target: ArrayLike) -> tuple[Vec, Vec]:
    """Least-squares rotation R and translation t with ``target ~ R @ source + t``."""
    A = np.asarray(source, dtype=float)
    B = np.asarray(target, dtype=float)
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    H = (A - ca).T @ (B - cb)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, cb - R @ ca


def estimate_pose(
    correspondences: Sequence[tuple[ArrayLike, ArrayLike, bool]],
    reject_dynamic: bool = True,
    timestamp: float = 0.0,
) -> PoseEstimate:
    """Camera pose from (map point, measured camera-frame point, dynamic flag) triples."""
    rows = [(w, c) for w, c, flag in correspondences if not (reject_dynamic and flag)]
    if len(rows) < 3:
        raise EstimationError(f"need >= 3 correspondences, have {len(rows)}")
    world = np.array([r[0] for r in rows], dtype=float)
    cam = np.array([r[1] for r in rows], dtype=float)
    sv = np.linalg.svd(world - world.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-6 * max(sv[0], 1e-12):
        raise EstimationError("correspondences are collinear")
    R, t = kabsch(cam, world)
    resid = world - (cam @ R.T + t)
    rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
    return PoseEstimate(Pose.from_matrix(R, t), len(rows), rms, timestamp)


def correspondences_from(observations: Sequence[LandmarkObservation]) -> list[tuple[Vec, Vec, bool]]:
    return [(o.map_point, o.point, o.dynamic_flag) for o in observations]


# ---------------------------------------------------------------------------
# obstacle extraction


def remove_ground(cloud: LabeledPointCloud, z_threshold: float) -> LabeledPointCloud:
    if z_threshold <= 0.0:
        raise ValueError("z_threshold must be > 0")
    return cloud.subset(cloud.points[:, 2] >= z_threshold)


NOISE = -1


def dbscan(points: ArrayLike, eps: float, min_pts: int) -> NDArray[np.int64]:
    """DBSCAN labels (``-1`` for noise).

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Clusters are connected components of core points; border
    points join the lowest-labelled cluster among their core neighbours.
    Clusters are numbered by their smallest member index, so the labelling
    is a pure function of the point set up to that ordering.
    """
    if eps <= 0.0 or min_pts < 1:
        raise ValueError("need eps > 0 and min_pts >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)
    np.add.at(counts, pairs[:, 0], 1)
    np.add.at(counts, pairs[:, 1], 1)
    core = counts >= min_pts
    if not np.any(core):
        return labels

    both = core[pairs[:, 0]] & core[pairs[:, 1]]
    cp = pairs[both]
    graph = coo_matrix((np.ones(len(cp)), (cp[:, 0], cp[:, 1])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.nonzero(core)[0]
    # renumber components by first (smallest-index) core member
    first: dict[int, int] = {}
    for i in core_idx:
        first.setdefault(int(comp[i]), len(first))
    labels[core_idx] = [first[int(comp[i])] for i in core_idx]

    # border points: non-core with a core neighbour
    a, b = pairs[:, 0], pairs[:, 1]
    border_links = np.concatenate(
        (np.column_stack((a, b))[~core[a] & core[b]], np.column_stack((b, a))[~core[b] & core[a]])
    )
    if len(border_links):
        cand = labels[border_links[:, 1]]
        best = np.full(n, np.iinfo(np.int64).max)
        np.minimum.at(best, border_links[:, 0], cand)
        has = best != np.iinfo(np.int64).max
        labels[has & ~core] = best[has & ~core]
    return labels


@dataclass(frozen=True, eq=False)
class ObstacleEstimate:
    centroid: Vec
    box_center: Vec
    half_extents: Vec
    axes: Vec  # 3x3, columns are the box axes in world frame
    velocity: Vec = field(default_factory=lambda: np.zeros(3))
    point_count: int = 0
    track_id: int = -1
    timestamp: float = 0.0

    def predicted(self, horizon: float) -> ObstacleEstimate:
        shift = self.velocity * horizon
        return replace(self, centroid=self.centroid + shift, box_center=self.box_center + shift)

    def surface_distance(self, point: ArrayLike) -> float:
        """Distance from ``point`` to the oriented box (0 inside)."""
        local = (np.asarray(point, dtype=float) - self.box_center) @ self.axes
        q = np.abs(local) - self.half_extents
        return float(np.linalg.norm(np.maximum(q, 0.0)))

    def closest_point(self, point: ArrayLike) -> Vec:
        local = (np.asarray(point, dtype=float) - self.box_center) @ self.axes
        return self.box_center + self.axes @ np.clip(local, -self.half_extents, self.half_extents)


@dataclass(frozen=True)
class PerceptionParams:
    z_threshold: float = 0.15
    eps: float = 0.3
    min_pts: int = 8
    max_range: float = 6.0
    gate: float = 1.0
    alpha: float = 0.5
    reject_dynamic: bool = True
    surface_bias_correction: bool = True
    max_points: int = 1500  # stride-subsample larger clouds before clustering


def _settle_degenerate_pair(centered: Vec, axes: Vec, i: int) -> Vec:
    # eigenvectors of a (near-)repeated eigenvalue are arbitrary within their
    # plane; pick the in-plane rotation giving the smallest rectangle
    a, b = axes[:, i], axes[:, i + 1]
    pa, pb = centered @ a, centered @ b
    theta = np.linspace(0.0, np.pi / 2, 91)[:-1]
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    u = np.abs(c * pa + s * pb).max(axis=1)
    v = np.abs(-s * pa + c * pb).max(axis=1)
    k = int(np.argmin(u * v))
    out = axes.copy()
    out[:, i] = np.cos(theta[k]) * a + np.sin(theta[k]) * b
    out[:, i + 1] = -np.sin(theta[k]) * a + np.cos(theta[k]) * b
    return out


def pca_box(points: Vec, degenerate_ratio: float = 0.1) -> tuple[Vec, Vec, Vec, Vec]:
    """Centroid, box center, half extents and axes of a PCA-aligned bounding box.

    Axes are covariance eigenvectors, largest variance first. When two
    eigenvalues agree within ``degenerate_ratio`` the pair is rotated in its
    plane to the tightest rectangle.
    """
    c = points.mean(axis=0)
    if len(points) >= 3:
        cov = np.cov((points - c).T)
        vals, vecs = np.linalg.eigh(cov)
        vals, axes = vals[::-1], vecs[:, ::-1]
        for i in (0, 1):
            if vals[i] > 0 and vals[i] - vals[i + 1] <= degenerate_ratio * vals[i]:
                axes = _settle_degenerate_pair(points - c, axes, i)
    else:
        axes = np.eye(3)
    if np.linalg.det(axes) < 0:
        axes[:, 2] = -axes[:, 2]
    proj = (points - c) @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    # half extents from the centroid, per the largest absolute projection
    half = np.maximum(np.maximum(np.abs(lo), np.abs(hi)), 1e-3)
    return c, c.copy(), half, axes


def extract_obstacles(
    cloud: LabeledPointCloud,
    params: PerceptionParams = PerceptionParams(),
    sensor_origin: ArrayLike | None = None,
    timestamp: float = 0.0,
) -> list[ObstacleEstimate]:
    pts_mask = cloud.moving
    if sensor_origin is not None and np.any(pts_mask):
        d = np.linalg.norm(cloud.points - np.asarray(sensor_origin, dtype=float), axis=1)
        pts_mask &= d <= params.max_range
    moving = remove_ground(cloud.subset(pts_mask), params.z_threshold)
    if len(moving) == 0:
        return []
    if len(moving) > params.max_points:
        # a fixed stride keeps the per-pixel sampling, so centroids stay unbiased
        keep = np.zeros(len(moving), dtype=bool)
        keep[:: -(-len(moving) // params.max_points)] = True
        moving = moving.subset(keep)
    labels = dbscan(moving.points, params.eps, params.min_pts)
    out = []
    for k in range(labels.max() + 1):
        members = moving.points[labels == k]
        c, bc, half, axes = pca_box(members)
        if sensor_origin is not None and params.surface_bias_correction:
            c = c + visible_surface_offset(members, np.asarray(sensor_origin, dtype=float))
        out.append(ObstacleEstimate(c, bc, half, axes, point_count=len(members), timestamp=timestamp))
    return out


def visible_surface_offset(points: Vec, sensor_origin: Vec) -> Vec:
    """Horizontal shift from the mean of a round object's visible surface to its axis.

    A camera only samples the near half of an upright cylinder; with pixel
    sampling the surface mean sits ``pi/4 * r`` in front of the axis, where
    ``r`` is half the cluster's width across the line of sight.
    """
    c = points.mean(axis=0)
    view = c[:2] - sensor_origin[:2]
    n = float(np.linalg.norm(view))
    if n < 1e-9:
        return np.zeros(3)
    view /= n
    across = points[:, :2] @ np.array([-view[1], view[0]])
    r = 0.5 * float(across.max() - across.min())
    return np.array([view[0], view[1], 0.0]) * (0.25 * np.pi * r)


def track_obstacles(
    previous: Sequence[ObstacleEstimate],
    current: Sequence[ObstacleEstimate],
    dt: float,
    gate: float = 1.0,
    alpha: float = 0.5,
    next_id: int | None = None,
) -> list[ObstacleEstimate]:
    """Greedy nearest-centroid association with EMA-smoothed velocities.

    Unmatched current estimates open new tracks with zero velocity. New ids
    start at ``next_id`` (default: one past the largest previous id).
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    if next_id is None:
        next_id = max((o.track_id for o in previous), default=-1) + 1
    pairs = []
    for i, cur in enumerate(current):
        for j, prev in enumerate(previous):
            d = float(np.linalg.norm(cur.centroid - prev.centroid))
            if d <= gate:
                pairs.append((d, i, j))
    pairs.sort()
    used_cur: set[int] = set()
    used_prev: set[int] = set()
    match: dict[int, int] = {}
    for _, i, j in pairs:
        if i in used_cur or j in used_prev:
            continue
        match[i] = j
        used_cur.add(i)
        used_prev.add(j)

    out = []
    for i, cur in enumerate(current):
        if i in match:
            prev = previous[match[i]]
            raw = (cur.centroid - prev.centroid) / dt
            vel = alpha * raw + (1.0 - alpha) * prev.velocity
            out.append(replace(cur, velocity=vel, track_id=prev.track_id))
        else:
            out.append(replace(cur, velocity=np.zeros(3), track_id=next_id))
            next_id += 1
    return out
