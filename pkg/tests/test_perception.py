import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerograsp.geometry import Pose, quat_from_rotvec
from aerograsp.perception import (
    NOISE,
    EstimationError,
    ObstacleEstimate,
    PerceptionParams,
    dbscan,
    estimate_pose,
    extract_obstacles,
    pca_box,
    remove_ground,
    track_obstacles,
)
from aerograsp.scenario import BaseCameraConfig
from aerograsp.sensors import LabeledPointCloud, depth_to_pointcloud, render_depth
from aerograsp.world import HitClass, Pedestrian
from conftest import make_world

rotvecs = st.tuples(*[st.floats(-3.0, 3.0)] * 3).map(np.array)
shifts = st.tuples(*[st.floats(-10.0, 10.0)] * 3).map(np.array)


def correspondences(cam, world_pts, flags=None):
    flags = flags if flags is not None else [False] * len(world_pts)
    return [(w, c, f) for w, c, f in zip(world_pts, cam.apply_inverse(world_pts), flags)]


def random_landmarks(rng, n=12):
    return rng.uniform([-5, -5, 0], [5, 5, 3], (n, 3))


# ---------------------------------------------------------------- pose estimation


def test_noiseless_alignment_is_exact():
    rng = np.random.default_rng(0)
    cam = Pose(rng.normal(0, 2, 3), quat_from_rotvec([0.3, -0.2, 1.1]))
    est = estimate_pose(correspondences(cam, random_landmarks(rng)))
    assert est.pose.allclose(cam, atol=1e-9)
    assert est.residual <= 1e-9
    assert est.inliers == 12


def test_identity_pose():
    rng = np.random.default_rng(1)
    est = estimate_pose(correspondences(Pose.identity(), random_landmarks(rng)))
    assert est.pose.allclose(Pose.identity(), atol=1e-9)


def test_rejection_ablation_twelve_plus_four():
    rng = np.random.default_rng(2)
    cam = Pose([1.0, 2.0, 1.2], quat_from_rotvec([0.0, 0.0, 0.7]))
    static = random_landmarks(rng, 12)
    moved = random_landmarks(rng, 4)
    # the four dynamic samples were mapped where the pedestrian stood 1 s ago
    corrupted = correspondences(cam, moved, [True] * 4)
    corrupted = [(w - [0.5, 0.0, 0.0], c, f) for w, c, f in corrupted]
    rows = correspondences(cam, static) + corrupted
    on = estimate_pose(rows, reject_dynamic=True)
    off = estimate_pose(rows, reject_dynamic=False)
    assert on.pose.allclose(cam, atol=1e-9)
    assert on.inliers == 12 and off.inliers == 16
    # without rejection the solution absorbs part of the 0.5 m shift; the exact
    # no-outlier oracle is the true pose, so any bias shows up as error
    err_off = np.linalg.norm(off.pose.position - cam.position)
    oracle = estimate_pose(correspondences(cam, static), reject_dynamic=False)
    assert err_off > np.linalg.norm(oracle.pose.position - cam.position) + 0.05
    assert off.residual > 0.05


@settings(max_examples=50, deadline=None)
@given(rotvecs, shifts, rotvecs, shifts)
def test_estimate_is_equivariant(rv_cam, p_cam, rv_T, p_T):
    rng = np.random.default_rng(5)
    pts = random_landmarks(rng)
    cam = Pose(p_cam, quat_from_rotvec(rv_cam))
    T = Pose(p_T, quat_from_rotvec(rv_T))
    base = estimate_pose(correspondences(cam, pts))
    moved = estimate_pose([(T.apply(w), c, f) for w, c, f in correspondences(cam, pts)])
    assert moved.pose.allclose(T @ base.pose, atol=1e-9)


def test_too_few_or_collinear_fail():
    cam = Pose.identity()
    with pytest.raises(EstimationError):
        estimate_pose(correspondences(cam, np.array([[0, 0, 1.0], [1, 0, 1.0]])))
    line = np.array([[0, 0, 1.0], [1, 0, 1.0], [2, 0, 1.0], [3, 0, 1.0]])
    with pytest.raises(EstimationError):
        estimate_pose(correspondences(cam, line))
    # rejection can drop a set below the minimum
    pts = random_landmarks(np.random.default_rng(3), 4)
    with pytest.raises(EstimationError):
        estimate_pose(correspondences(cam, pts, [True, True, False, False]))


# ---------------------------------------------------------------- ground removal


def cloud_of(points, labels=None):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    labels = np.full(len(points), int(HitClass.MOVING), np.int8) if labels is None else labels
    return LabeledPointCloud(points, labels, np.abs(points[:, 2]) < 0.05)


def test_remove_ground_examples():
    rng = np.random.default_rng(0)
    flat = rng.normal(0, 1, (50, 3)) * [1, 1, 0]
    assert len(remove_ground(cloud_of(flat), 0.1)) == 0
    high = flat + [0, 0, 1.0]
    assert np.array_equal(remove_ground(cloud_of(high), 0.1).points, high)
    mixed = rng.uniform([-1, -1, -0.2], [1, 1, 0.5], (200, 3))
    kept = remove_ground(cloud_of(mixed), 0.15).points
    assert np.array_equal(kept, mixed[mixed[:, 2] >= 0.15])
    with pytest.raises(ValueError):
        remove_ground(cloud_of(mixed), 0.0)


# ---------------------------------------------------------------- DBSCAN


def brute_dbscan(pts, eps, min_pts):
    n = len(pts)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    adj = d <= eps
    core = adj.sum(axis=1) >= min_pts
    labels = np.full(n, NOISE)
    k = 0
    for s in range(n):
        if not core[s] or labels[s] != NOISE:
            continue
        labels[s] = k
        queue = deque([s])
        while queue:
            i = queue.popleft()
            for j in np.nonzero(adj[i] & core)[0]:
                if labels[j] == NOISE:
                    labels[j] = k
                    queue.append(j)
        k += 1
    for i in np.nonzero(~core)[0]:
        near = labels[adj[i] & core]
        if len(near):
            labels[i] = near.min()
    return labels


def random_blobs(rng):
    k = rng.integers(1, 5)
    centers = rng.uniform(-3, 3, (k, 3))
    parts = [c + rng.normal(0, rng.uniform(0.05, 0.3), (rng.integers(3, 40), 3)) for c in centers]
    parts.append(rng.uniform(-4, 4, (rng.integers(0, 15), 3)))
    return np.concatenate(parts)


def test_dbscan_matches_brute_force_on_200_sets():
    rng = np.random.default_rng(42)
    for _ in range(200):
        pts = random_blobs(rng)
        eps, min_pts = rng.uniform(0.1, 0.6), int(rng.integers(1, 10))
        assert np.array_equal(dbscan(pts, eps, min_pts), brute_dbscan(pts, eps, min_pts))


def core_partition(pts, labels, eps, min_pts):
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    core = (d <= eps).sum(axis=1) >= min_pts
    groups = {}
    for i in np.nonzero(core)[0]:
        groups.setdefault(labels[i], set()).add(tuple(pts[i]))
    return {frozenset(g) for g in groups.values()}, {tuple(p) for p in pts[labels == NOISE]}


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_dbscan_invariant_under_permutation(seed):
    rng = np.random.default_rng(seed)
    pts = random_blobs(rng)
    perm = rng.permutation(len(pts))
    a = core_partition(pts, dbscan(pts, 0.3, 4), 0.3, 4)
    b = core_partition(pts[perm], dbscan(pts[perm], 0.3, 4), 0.3, 4)
    assert a == b


def test_dbscan_examples():
    rng = np.random.default_rng(1)
    blob = rng.normal(0, 0.05, (20, 3))
    two = np.concatenate((blob, blob + [3.0, 0, 0]))
    labels = dbscan(two, 0.3, 4)
    assert set(labels[:20]) == {0} and set(labels[20:]) == {1}
    assert dbscan([[0.0, 0.0, 0.0]], 0.3, 2)[0] == NOISE
    tight = rng.uniform(0, 0.05, (10, 3))
    assert set(dbscan(tight, 0.3, 10)) == {0}
    assert len(dbscan(np.zeros((0, 3)), 0.3, 2)) == 0
    with pytest.raises(ValueError):
        dbscan(blob, 0.0, 2)


# ---------------------------------------------------------------- extraction


def test_box_cloud_recovers_half_extents():
    rng = np.random.default_rng(7)
    half = np.array([0.2, 0.2, 0.85])
    pts = rng.uniform(-half, half, (3000, 3)) + [2.0, 1.0, 1.05]
    obs = extract_obstacles(cloud_of(pts), PerceptionParams(max_points=5000))
    assert len(obs) == 1
    assert np.allclose(np.sort(obs[0].half_extents), np.sort(half), rtol=0.05)
    assert np.allclose(obs[0].centroid, [2.0, 1.0, 1.05], atol=0.02)


def test_empty_cloud_gives_no_obstacles():
    assert extract_obstacles(LabeledPointCloud.empty()) == []
    static = cloud_of(np.ones((30, 3)), np.full(30, int(HitClass.STATIC), np.int8))
    assert extract_obstacles(static) == []


def test_two_pedestrians_two_meters_apart():
    peds = [
        Pedestrian([[4.0, -1.0, 0.0], [4.0, -2.0, 0.0]], speed=1e-6, radius=0.25, height=1.75, loop=False),
        Pedestrian([[4.0, 1.0, 0.0], [4.0, 2.0, 0.0]], speed=1e-6, radius=0.25, height=1.75, loop=False),
    ]
    w = make_world(pedestrians=peds)
    cfg = BaseCameraConfig()
    cam = Pose.from_matrix(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]), [0.0, 0.0, 1.2])
    img = render_depth(w, cam, cfg.intrinsics, 0.0, 0.01, np.random.default_rng(0))
    cloud = depth_to_pointcloud(img, cfg.intrinsics, cam)
    obs = extract_obstacles(cloud, PerceptionParams(eps=0.3), sensor_origin=cam.position)
    assert len(obs) == 2
    got = sorted(o.centroid[:2].tolist() for o in obs)
    assert np.linalg.norm(np.array(got[0]) - [4.0, -1.0]) < 0.15
    assert np.linalg.norm(np.array(got[1]) - [4.0, 1.0]) < 0.15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_pca_box_contains_cluster(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 1, (3, 3))
    pts = rng.normal(0, 1, (int(rng.integers(3, 200)), 3)) @ A.T
    c, bc, half, axes = pca_box(pts)
    assert np.all(half > 0)
    assert np.allclose(axes.T @ axes, np.eye(3), atol=1e-9)
    est = ObstacleEstimate(c, bc, half, axes)
    inside = [est.surface_distance(p) <= 1e-9 for p in pts]
    assert np.mean(inside) >= 0.95


# ---------------------------------------------------------------- tracking


def est_at(p, track_id=-1, v=(0.0, 0.0, 0.0)):
    p = np.asarray(p, dtype=float)
    return ObstacleEstimate(p, p, np.full(3, 0.2), np.eye(3), np.asarray(v, dtype=float), track_id=track_id)


def test_static_track_has_zero_velocity():
    prev = track_obstacles([], [est_at([1, 1, 1])], 0.1)
    cur = track_obstacles(prev, [est_at([1, 1, 1])], 0.1)
    assert cur[0].track_id == prev[0].track_id
    assert np.allclose(cur[0].velocity, 0.0)


def test_ema_velocity_from_zero_prior():
    prev = track_obstacles([], [est_at([0, 0, 1])], 0.1)
    cur = track_obstacles(prev, [est_at([0.1, 0, 1])], 0.1)
    assert np.allclose(cur[0].velocity, [0.5, 0.0, 0.0])


def test_new_tracks_start_still_and_get_fresh_ids():
    prev = track_obstacles([], [est_at([0, 0, 1])], 0.1)
    cur = track_obstacles(prev, [est_at([0, 0, 1]), est_at([5, 0, 1])], 0.1)
    assert [o.track_id for o in cur] == [0, 1]
    assert np.allclose(cur[1].velocity, 0.0)
    with pytest.raises(ValueError):
        track_obstacles(prev, cur, 0.0)


def test_crossing_tracks_keep_ids():
    dt = 0.1
    tracks = track_obstacles([], [est_at([4.0, 1.5, 1]), est_at([0, -1.5, 1])], dt)
    ids = {round(o.centroid[1], 1): o.track_id for o in tracks}
    for k in range(1, 40):
        x = 0.1 * k
        # two walkers pass each other in x while staying 3 m apart in y
        cur = [est_at([4.0 - x, 1.5, 1]), est_at([x, -1.5, 1])]
        tracks = track_obstacles(tracks, cur, dt)
    assert tracks[1].track_id == ids[-1.5]
    assert tracks[0].track_id == ids[1.5]
    assert tracks[1].velocity[0] == pytest.approx(1.0, abs=1e-6)
