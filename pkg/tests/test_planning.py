import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerograsp.episode import prior_map
from aerograsp.mapping import FREE, OCCUPIED, VoxelGrid, compute_esdf
from aerograsp.perception import ObstacleEstimate
from aerograsp.planning import (
    Path,
    PlannerParams,
    PlanningFailure,
    densify,
    local_plan_step,
    optimize_path,
    path_cost,
    plan_rrt_star,
    search_path,
)
from aerograsp.world import Region

P = PlannerParams()


def open_esdf(size=(14.0, 6.0, 3.0), vs=0.1):
    dims = tuple(int(round(s / vs)) for s in size)
    g = VoxelGrid.from_states([0.0, 0.0, 0.0], vs, np.full(dims, FREE, np.uint8))
    return compute_esdf(g, 2.0)


def box_esdf(lo, hi, size=(10.0, 6.0, 3.0), vs=0.1):
    dims = tuple(int(round(s / vs)) for s in size)
    s = np.full(dims, FREE, np.uint8)
    a = np.floor(np.array(lo) / vs).astype(int)
    b = np.ceil(np.array(hi) / vs).astype(int)
    s[a[0]:b[0], a[1]:b[1], a[2]:b[2]] = OCCUPIED
    return compute_esdf(VoxelGrid.from_states([0.0, 0.0, 0.0], vs, s), 2.0)


# ---------------------------------------------------------------- path type


def test_path_needs_two_points_and_densifies():
    with pytest.raises(ValueError):
        Path([[0.0, 0.0, 0.0]])
    d = densify([[0, 0, 0], [1.0, 0, 0], [1.0, 0.6, 0]], 0.25)
    steps = np.linalg.norm(np.diff(d, axis=0), axis=1)
    assert np.all(steps <= 0.25 + 1e-12)
    assert np.allclose(d[[0, -1]], [[0, 0, 0], [1, 0.6, 0]])
    assert Path(d).length == pytest.approx(1.6)


# ---------------------------------------------------------------- RRT*


def test_start_inside_region_is_trivial():
    e = open_esdf()
    res = plan_rrt_star(e, [5.0, 3.0, 1.5], Region([5.2, 3.0, 1.5], 1.0), P, np.random.default_rng(0))
    assert res.success and len(res.path) == 2 and res.iterations == 0


def test_empty_map_paths_are_near_straight():
    e = open_esdf()
    start, goal = np.array([1.5, 3.0, 1.5]), Region([11.5, 3.0, 1.5], 0.5)
    for seed in range(20):
        res = plan_rrt_star(e, start, goal, P, np.random.default_rng(seed))
        assert res.success
        assert res.path.length <= 1.2 * 10.0
        assert goal.contains(res.path.end)


def test_sealed_start_fails():
    # hollow cube: walls one voxel thick around a 2 m cavity
    vs = 0.1
    s = np.full((40, 40, 30), FREE, np.uint8)
    s[5:35, 5:35, 2:28] = OCCUPIED
    s[6:34, 6:34, 3:27] = FREE
    e = compute_esdf(VoxelGrid.from_states([0, 0, 0], vs, s), 2.0)
    res = plan_rrt_star(e, [2.0, 2.0, 1.5], Region([3.8, 3.8, 1.5], 0.1), PlannerParams(max_iterations=300, z_range=None), np.random.default_rng(0))
    assert not res.success and res.iterations == 300


def test_start_in_collision_raises():
    e = box_esdf([4, 2, 0], [6, 4, 3])
    with pytest.raises(PlanningFailure):
        plan_rrt_star(e, [5.0, 3.0, 1.5], Region([9.0, 3.0, 1.5], 0.5), P, np.random.default_rng(0))


def test_reference_plans_are_collision_free(ref):
    _, esdf = prior_map(ref)
    start = np.array([ref.start[0], ref.start[1], ref.vehicle.cruise_altitude])
    goal = ref.goal_region
    for seed in range(3):
        res = plan_rrt_star(esdf, start, goal, ref.planner, np.random.default_rng(seed))
        assert res.success
        # independent post-check at 1 cm resolution
        pts = densify(res.path.waypoints, 0.01)
        assert np.all(esdf.distance_at(pts) > ref.planner.d_safe)


# ---------------------------------------------------------------- optimizer


def test_zigzag_straightens_without_obstacles():
    e = open_esdf()
    x = np.linspace(1.0, 12.0, 30)
    q = np.column_stack((x, 3.0 + 0.3 * (-1) ** np.arange(30), np.full(30, 1.5)))
    q[[0, -1], 1] = 3.0
    out = optimize_path(Path(q), e, PlannerParams(d_safe=0.3), max_iter=2000, gtol=1e-8)
    w = out.path.waypoints
    assert np.allclose(w[[0, -1]], q[[0, -1]])
    assert np.max(np.abs(w[:-2] - 2 * w[1:-1] + w[2:])) < 1e-4
    assert out.cost < 1e-8


def fd_gradient(q, esdf, params, h=1e-6):
    g = np.zeros_like(q)
    for i in range(1, len(q) - 1):
        for k in range(3):
            a, b = q.copy(), q.copy()
            a[i, k] += h
            b[i, k] -= h
            g[i, k] = (path_cost(a, esdf, params)[0] - path_cost(b, esdf, params)[0]) / (2 * h)
    return g


def test_cost_gradient_matches_finite_differences(ref):
    _, esdf = prior_map(ref)
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.uniform([2, -4, 0.8], [16, 4, 1.8])
        b = a + rng.normal(0, 2.0, 3)
        q = densify([a, b], 0.25) + rng.normal(0, 0.05, (1, 3))
        q = q + np.vstack(([0, 0, 0], rng.normal(0, 0.05, (len(q) - 2, 3)), [0, 0, 0]))
        _, g = path_cost(q, esdf, ref.planner)
        g[[0, -1]] = 0.0
        fd = fd_gradient(q, esdf, ref.planner)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12) + 1e-9


def test_optimizer_clears_box_shell():
    e = box_esdf([4.0, 2.0, 0.0], [6.0, 3.0, 3.0])
    params = PlannerParams(d_safe=0.5)
    # straight line grazing the box at 0.25 m, inside the 0.5 m shell
    q = densify([[1.0, 3.25, 1.5], [9.0, 3.25, 1.5]], 0.25)
    out = optimize_path(Path(q), e, params)
    d = e.distance_at(out.path.waypoints)
    assert np.all(d >= params.d_safe - 0.02)
    assert np.all(np.diff(out.cost_history) <= 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_optimizer_descent_is_monotone(seed):
    e = box_esdf([4.0, 2.0, 0.0], [6.0, 3.0, 3.0])
    rng = np.random.default_rng(seed)
    q = densify([[1.0, rng.uniform(1.0, 5.0), 1.5], [9.0, rng.uniform(1.0, 5.0), 1.5]], 0.25)
    q[1:-1] += rng.normal(0, 0.2, (len(q) - 2, 3))
    out = optimize_path(Path(q), e, P, max_iter=60)
    assert np.all(np.diff(out.cost_history) <= 1e-12)
    assert out.cost <= path_cost(q, e, P)[0]


# ---------------------------------------------------------------- local planner


def obstacle_at(c, half=(0.2, 0.2, 0.85)):
    c = np.asarray(c, dtype=float)
    return ObstacleEstimate(c, c, np.array(half), np.eye(3))


STRAIGHT = Path(densify([[0.0, 0.0, 1.2], [10.0, 0.0, 1.2]], 0.25))
FAR_GOAL = Region([20.0, 0.0, 1.2], 1.0)


def test_free_follow_points_along_the_path():
    v, k = local_plan_step([1.0, 0.0, 1.2], STRAIGHT, 0, [obstacle_at([5.0, 3.0, 1.0])], FAR_GOAL, P)
    assert v[0] > 0 and abs(v[1]) < 1e-12 and abs(v[2]) < 1e-12
    assert k == 4


def test_obstacle_on_lookahead_pushes_back():
    x = np.array([1.0, 0.0, 1.2])
    # box surface 0.5 m ahead on the lookahead direction
    ob = obstacle_at([1.7, 0.0, 1.2])
    v, _ = local_plan_step(x, STRAIGHT, 0, [ob], FAR_GOAL, P)
    assert v[0] < 0.0


def test_inside_region_is_still():
    v, _ = local_plan_step([20.2, 0.1, 1.2], STRAIGHT, 0, [], FAR_GOAL, P)
    assert np.allclose(v, 0.0)


def test_repulsion_silent_beyond_trigger():
    x = np.array([1.0, 0.0, 1.2])
    ob = obstacle_at([1.0, 1.2, 1.2])  # surface 1.0 m away
    a, _ = local_plan_step(x, STRAIGHT, 0, [ob], FAR_GOAL, P)
    b, _ = local_plan_step(x, STRAIGHT, 0, [], FAR_GOAL, P)
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(
    st.tuples(st.floats(-2, 12), st.floats(-3, 3), st.floats(0.5, 2.0)),
    st.lists(st.tuples(st.floats(-2, 12), st.floats(-3, 3)), max_size=4),
    st.integers(0, 40),
)
def test_command_never_exceeds_max_speed(x, obs, k):
    obstacles = [obstacle_at([ox, oy, 0.9]) for ox, oy in obs]
    v, k2 = local_plan_step(np.array(x), STRAIGHT, k, obstacles, FAR_GOAL, P)
    assert np.linalg.norm(v) <= P.max_speed + 1e-12
    assert k2 >= k


def test_region_attraction_reaches_region():
    goal = Region([4.0, 2.0, 1.2], 1.0)
    path = Path(densify([[0.0, 0.0, 1.2], [4.0, 2.0, 1.2]], 0.25))
    x, k, dt = np.array([0.0, 0.0, 1.2]), 0, 0.05
    fs = []
    for _ in range(400):
        v, k = local_plan_step(x, path, k, [], goal, P)
        x = x + v * dt
        fs.append(goal.f(x))
        if goal.contains(x):
            break
    assert goal.contains(x)
    outside = [f for f in fs if f > 0]
    assert np.all(np.diff(outside) < 0)


# ---------------------------------------------------------------- search circle


@pytest.mark.parametrize("n", [4, 8, 13])
def test_search_path_geometry(n):
    c = np.array([15.0, 0.0, 0.0])
    wps = search_path(c, 1.8, 1.2, n, entry=[10.0, 0.5, 1.2])
    assert len(wps) == n
    angles = []
    for p, yaw in wps:
        assert math.hypot(*(p[:2] - c[:2])) == pytest.approx(1.8, abs=1e-12)
        assert p[2] == 1.2
        to_c = (c[:2] - p[:2]) / np.linalg.norm(c[:2] - p[:2])
        assert to_c @ [math.cos(yaw), math.sin(yaw)] == pytest.approx(1.0, abs=1e-9)
        angles.append(math.atan2(p[1] - c[1], p[0] - c[0]))
    steps = np.mod(np.diff(angles), 2 * math.pi)
    assert np.allclose(steps, 2 * math.pi / n)
    # starts at the waypoint nearest the entry
    d = [np.linalg.norm(p[:2] - [10.0, 0.5]) for p, _ in wps]
    assert int(np.argmin(d)) == 0


def test_search_path_validates():
    with pytest.raises(ValueError):
        search_path([0, 0, 0], 1.0, 1.0, 3)
    with pytest.raises(ValueError):
        search_path([0, 0, 0], 0.0, 1.0, 6)
