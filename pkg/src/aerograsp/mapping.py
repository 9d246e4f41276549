"""Voxel occupancy mapping and the Euclidean distance field used by the planners."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import Pose, rot_x, rot_z
from .sensors import CameraIntrinsics, LabeledPointCloud, depth_to_pointcloud, pixel_rays, render_depth
from .world import HitClass, World, static_distance

UNKNOWN, FREE, OCCUPIED = 0, 1, 2
HIT_THRESHOLD = 2
MISS_THRESHOLD = 5
_COUNTER_MAX = np.iinfo(np.uint16).max


@numba.njit(cache=True)
def _traverse(hits, misses, o, points, mark_end):
    nx, ny, nz = hits.shape
    cap = 65535
    for k in range(points.shape[0]):
        px, py, pz = points[k, 0], points[k, 1], points[k, 2]
        ix, iy, iz = int(math.floor(o[0])), int(math.floor(o[1])), int(math.floor(o[2]))
        ex, ey, ez = int(math.floor(px)), int(math.floor(py)), int(math.floor(pz))
        dx, dy, dz = px - o[0], py - o[1], pz - o[2]
        sx = 1 if dx > 0 else -1
        sy = 1 if dy > 0 else -1
        sz = 1 if dz > 0 else -1
        inf = 1e30
        tdx = abs(1.0 / dx) if dx != 0.0 else inf
        tdy = abs(1.0 / dy) if dy != 0.0 else inf
        tdz = abs(1.0 / dz) if dz != 0.0 else inf
        tmx = ((ix + 1 - o[0]) if dx > 0 else (o[0] - ix)) * tdx if dx != 0.0 else inf
        tmy = ((iy + 1 - o[1]) if dy > 0 else (o[1] - iy)) * tdy if dy != 0.0 else inf
        tmz = ((iz + 1 - o[2]) if dz > 0 else (o[2] - iz)) * tdz if dz != 0.0 else inf
        steps = abs(ex - ix) + abs(ey - iy) + abs(ez - iz)
        for _ in range(steps):
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                if misses[ix, iy, iz] < cap:
                    misses[ix, iy, iz] += 1
            if tmx <= tmy and tmx <= tmz:
                ix += sx
                tmx += tdx
            elif tmy <= tmz:
                iy += sy
                tmy += tdy
            else:
                iz += sz
                tmz += tdz
        if mark_end and 0 <= ex < nx and 0 <= ey < ny and 0 <= ez < nz:
            if hits[ex, ey, ez] < cap:
                hits[ex, ey, ez] += 1


@numba.njit(cache=True)
def _edt_1d(f, out, v, z):
    """Felzenszwalb-Huttenlocher lower envelope of parabolas for one line.

    Entries >= 1e300 are treated as infinite and never enter the envelope.
    """
    n = f.shape[0]
    k = -1
    for q in range(n):
        if f[q] >= 1e300:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -1e308
            z[1] = 1e308
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k] and k > 0:
                k -= 1
                continue
            if s <= z[k]:
                # k == 0 and the new parabola dominates everywhere
                v[0] = q
                z[0] = -1e308
                z[1] = 1e308
                break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = 1e308
            break
    if k < 0:
        for q in range(n):
            out[q] = 1e308
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        out[q] = (q - p) * (q - p) + f[p]


@numba.njit(cache=True)
def _edt_axis0(g):
    n0, n1, n2 = g.shape
    out = np.empty_like(g)
    f = np.empty(n0)
    o = np.empty(n0)
    v = np.empty(n0, dtype=np.int64)
    z = np.empty(n0 + 1)
    for j in range(n1):
        for k in range(n2):
            for i in range(n0):
                f[i] = g[i, j, k]
            _edt_1d(f, o, v, z)
            for i in range(n0):
                out[i, j, k] = o[i]
    return out


def squared_edt(sources: NDArray[np.bool_]) -> NDArray[np.float64]:
    """Exact squared Euclidean distance (in voxels) to the nearest source voxel."""
    g = np.where(sources, 0.0, 1e308)
    for axis in range(3):
        g = np.moveaxis(_edt_axis0(np.ascontiguousarray(np.moveaxis(g, axis, 0))), 0, axis)
    return g


@dataclass(eq=False)
class VoxelGrid:
    """Occupancy lattice with per-voxel hit and miss counters.

    Voxel ``(i, j, k)`` covers ``origin + voxel_size * [i, i+1) x [j, j+1) x [k, k+1)``.
    Updates happen in place (single writer); take ``states`` for a snapshot.
    """

    origin: NDArray[np.float64]
    voxel_size: float
    hits: NDArray[np.uint16]
    misses: NDArray[np.uint16]

    @classmethod
    def empty(cls, origin: ArrayLike, size: ArrayLike, voxel_size: float = 0.05) -> VoxelGrid:
        if voxel_size <= 0.0:
            raise ValueError("voxel_size must be > 0")
        dims = tuple(int(math.ceil(s / voxel_size - 1e-9)) for s in np.asarray(size, dtype=float))
        return cls(
            np.asarray(origin, dtype=float),
            float(voxel_size),
            np.zeros(dims, dtype=np.uint16),
            np.zeros(dims, dtype=np.uint16),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.hits.shape  # type: ignore[return-value]

    @property
    def states(self) -> NDArray[np.uint8]:
        occ = self.hits >= HIT_THRESHOLD
        free = (self.misses >= MISS_THRESHOLD) & (self.hits == 0)
        return np.where(occ, OCCUPIED, np.where(free, FREE, UNKNOWN)).astype(np.uint8)

    def to_voxel(self, points: ArrayLike) -> NDArray[np.float64]:
        return (np.asarray(points, dtype=float) - self.origin) / self.voxel_size

    def index_of(self, point: ArrayLike) -> tuple[int, int, int]:
        return tuple(int(i) for i in np.floor(self.to_voxel(point)))  # type: ignore[return-value]

    def center_of(self, index: ArrayLike) -> NDArray[np.float64]:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    @classmethod
    def from_states(cls, origin: ArrayLike, voxel_size: float, states: NDArray) -> VoxelGrid:
        states = np.asarray(states, dtype=np.uint8)
        hits = np.where(states == OCCUPIED, HIT_THRESHOLD, 0).astype(np.uint16)
        misses = np.where(states == FREE, MISS_THRESHOLD, 0).astype(np.uint16)
        return cls(np.asarray(origin, dtype=float), float(voxel_size), hits, misses)

    def dump(self, path: str | Path) -> None:
        header = {"origin": self.origin.tolist(), "voxel_size": self.voxel_size, "dims": list(self.dims)}
        with open(path, "wb") as fh:
            fh.write(b"AGVOX1\n")
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.states).tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> VoxelGrid:
        with open(path, "rb") as fh:
            if fh.readline() != b"AGVOX1\n":
                raise ValueError(f"{path}: not a voxel grid file")
            header = json.loads(fh.readline())
            dims = tuple(int(d) for d in header["dims"])
            raw = np.frombuffer(fh.read(), dtype=np.uint8)
        if raw.size != int(np.prod(dims)):
            raise ValueError(f"{path}: expected {np.prod(dims)} voxels, found {raw.size}")
        return cls.from_states(header["origin"], header["voxel_size"], raw.reshape(dims))


def integrate_scan(
    grid: VoxelGrid,
    cloud: LabeledPointCloud,
    sensor_origin: ArrayLike,
    clear_to: ArrayLike | None = None,
) -> VoxelGrid:
    """Ray-trace a scan into the grid: endpoints collect hits, traversed voxels misses.

    Points labelled as moving are skipped so the map only holds static
    background. ``clear_to`` optionally lists far points of rays that
    returned nothing; those rays add misses only. Returns ``grid`` (updated
    in place).
    """
    keep = cloud.labels != int(HitClass.MOVING)
    pts = cloud.points[keep]
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud contains non-finite points")
    o = grid.to_voxel(sensor_origin)
    if len(pts):
        _traverse(grid.hits, grid.misses, o, grid.to_voxel(pts), True)
    if clear_to is not None and len(clear_to):
        _traverse(grid.hits, grid.misses, o, grid.to_voxel(np.asarray(clear_to, dtype=float)), False)
    return grid


@dataclass(eq=False)
class EsdfGrid:
    origin: NDArray[np.float64]
    voxel_size: float
    distance: NDArray[np.float64]
    truncation: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.distance.shape  # type: ignore[return-value]

    @property
    def upper(self) -> NDArray[np.float64]:
        return self.origin + np.array(self.dims) * self.voxel_size

    def query_many(self, points: ArrayLike) -> tuple[NDArray, NDArray, NDArray]:
        """Trilinear distance and its analytic gradient at voxel-center lattice.

        Returns (distance (n,), gradient (n, 3), out_of_bounds (n,)). Points
        outside the lattice of voxel centers are clamped onto it; the gradient
        component along each clamped axis is zero.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        dims = np.array(self.dims)
        u = (p - self.origin) / self.voxel_size - 0.5
        hi = (dims - 1).astype(float)
        # a little slack so the outermost voxel centers count as inside despite rounding
        clamped = (u < -1e-9) | (u > hi + 1e-9)
        u = np.clip(u, 0.0, hi)
        i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(dims - 2, 0))
        fr = u - i0
        i1 = np.minimum(i0 + 1, dims - 1)
        D = self.distance
        x0, y0, z0 = i0.T
        x1, y1, z1 = i1.T
        fx, fy, fz = fr.T
        c000, c100 = D[x0, y0, z0], D[x1, y0, z0]
        c010, c110 = D[x0, y1, z0], D[x1, y1, z0]
        c001, c101 = D[x0, y0, z1], D[x1, y0, z1]
        c011, c111 = D[x0, y1, z1], D[x1, y1, z1]
        c00 = c000 + fx * (c100 - c000)
        c10 = c010 + fx * (c110 - c010)
        c01 = c001 + fx * (c101 - c001)
        c11 = c011 + fx * (c111 - c011)
        c0 = c00 + fy * (c10 - c00)
        c1 = c01 + fy * (c11 - c01)
        d = c0 + fz * (c1 - c0)

        gx = (1 - fy) * (1 - fz) * (c100 - c000) + fy * (1 - fz) * (c110 - c010) + (1 - fy) * fz * (c101 - c001) + fy * fz * (c111 - c011)
        gy = (1 - fz) * (c10 - c00) + fz * (c11 - c01)
        gz = c1 - c0
        grad = np.column_stack((gx, gy, gz)) / self.voxel_size
        grad[clamped] = 0.0
        return d, grad, clamped.any(axis=1)

    def query(self, point: ArrayLike) -> tuple[float, NDArray[np.float64], bool]:
        d, g, oob = self.query_many(np.asarray(point, dtype=float)[None, :])
        return float(d[0]), g[0], bool(oob[0])

    def distance_at(self, points: ArrayLike) -> NDArray[np.float64]:
        return self.query_many(points)[0]


def compute_esdf(grid: VoxelGrid, truncation: float = 2.0) -> EsdfGrid:
    """Exact Euclidean distance to the nearest non-free voxel center, capped.

    Unknown voxels count as obstacles alongside occupied ones.
    """
    if truncation <= 0.0:
        raise ValueError("truncation must be > 0")
    sources = grid.states != FREE
    d2 = squared_edt(sources)
    dist = np.minimum(np.sqrt(d2) * grid.voxel_size, truncation)
    return EsdfGrid(np.array(grid.origin), grid.voxel_size, dist, float(truncation))


def map_grid_for(world: World, voxel_size: float, pad: float = 0.1) -> VoxelGrid:
    """Empty grid spanning the world bounds plus ``pad`` so the walls fall inside."""
    lo = world.bounds.lo - [pad, pad, pad]
    return VoxelGrid.empty(lo, world.bounds.size + 2 * pad, voxel_size)


_SURVEY_INTRINSICS = CameraIntrinsics(112, 84, 63.0, 63.0, 55.5, 41.5, 0.2, 10.0)
_BODY_TO_OPTICAL = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def survey_poses(
    world: World,
    heights: tuple[float, ...],
    spacing: float,
    yaws: int,
    tilts: tuple[float, ...] = (-0.6, 0.0, 0.6),
    clearance: float = 0.4,
) -> list[Pose]:
    """Camera poses of a lattice survey through the static free space."""
    lo, hi = world.bounds.lo, world.bounds.hi
    xs = np.arange(lo[0] + 0.5 * spacing, hi[0], spacing)
    ys = np.arange(lo[1] + 0.5 * spacing, hi[1], spacing)
    poses = []
    for x in xs:
        for y in ys:
            for z in heights:
                p = np.array([x, y, z])
                if static_distance(world, p, include_target=True) < clearance:
                    continue
                for k in range(yaws):
                    for tilt in tilts:
                        R = rot_z(2.0 * math.pi * k / yaws) @ _BODY_TO_OPTICAL @ rot_x(-tilt)
                        poses.append(Pose.from_matrix(R, p))
    return poses


def survey_map(
    world: World,
    voxel_size: float = 0.05,
    heights: tuple[float, ...] = (0.5, 1.2, 2.0),
    spacing: float = 3.0,
    yaws: int = 6,
) -> VoxelGrid:
    """Occupancy map of the static scene from a noiseless lattice survey.

    Pedestrians are left out of the rendering so the map is the static
    background regardless of when the survey happens.
    """
    static_world = World(world.bounds, world.boxes, (), world.landmarks, world.target)
    grid = map_grid_for(world, voxel_size)
    rng = np.random.default_rng(0)
    intr = _SURVEY_INTRINSICS
    rays = pixel_rays(intr)
    for cam in survey_poses(world, heights, spacing, yaws):
        img = render_depth(static_world, cam, intr, 0.0, 0.0, rng)
        sky = ~img.valid.reshape(-1)
        far = cam.apply(rays[sky] * intr.max_range)
        integrate_scan(grid, depth_to_pointcloud(img, intr, cam), cam.position, clear_to=far)
    return grid
