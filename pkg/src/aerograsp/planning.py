"""Global RRT* planning on the distance field, path smoothing, the reactive
potential-field follower and the circular search pattern."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .mapping import EsdfGrid
from .perception import ObstacleEstimate
from .world import Region

Vec = NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class Path:
    waypoints: Vec
    fixed_endpoints: bool = True

    def __post_init__(self) -> None:
        w = np.array(self.waypoints, dtype=float).reshape(-1, 3)
        if len(w) < 2:
            raise ValueError("a path needs at least 2 waypoints")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    @property
    def start(self) -> Vec:
        return self.waypoints[0]

    @property
    def end(self) -> Vec:
        return self.waypoints[-1]

    def densified(self, max_segment: float = 0.25) -> Path:
        return Path(densify(self.waypoints, max_segment), self.fixed_endpoints)


def densify(points: ArrayLike, max_segment: float) -> Vec:
    """Insert evenly spaced points so no segment exceeds ``max_segment``."""
    pts = np.asarray(points, dtype=float)
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / max_segment - 1e-9)))
        s = np.arange(1, n + 1)[:, None] / n
        out.append(a + s * (b - a))
    return np.vstack(out)


@dataclass(frozen=True)
class PlannerParams:
    step_size: float = 1.0
    goal_bias: float = 0.1
    max_iterations: int = 3000
    rewire_radius: float = 1.5
    d_safe: float = 0.5
    w_s: float = 1.0
    w_c: float = 50.0
    trigger_distance: float = 0.8
    k_att: float = 1.0
    k_rep: float = 2.0
    max_speed: float = 1.0
    lookahead: float = 1.0
    horizon: float = 0.5
    max_segment: float = 0.25
    check_resolution: float = 0.05
    refine_iterations: int = 300
    region_margin: float = 2.0
    min_approach_fraction: float = 0.25
    z_range: tuple[float, float] | None = (0.6, 2.0)

    def __post_init__(self) -> None:
        positive = (
            "step_size", "max_iterations", "rewire_radius", "d_safe", "w_s", "w_c",
            "trigger_distance", "k_att", "k_rep", "max_speed", "lookahead", "max_segment",
            "check_resolution",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"planner parameter {name} must be > 0")
        if not 0.0 < self.goal_bias < 1.0:
            raise ValueError("goal_bias must lie in (0, 1)")


class PlanningFailure(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PlanResult:
    path: Path | None
    iterations: int
    tree_size: int
    raw_path: Path | None = None

    @property
    def success(self) -> bool:
        return self.path is not None


def segment_clear(esdf: EsdfGrid, a: Vec, b: Vec, d_safe: float, resolution: float) -> bool:
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / resolution)))
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    d, _, oob = esdf.query_many(a + s * (b - a))
    return bool(np.all(d > d_safe) and not np.any(oob))


def path_clear(esdf: EsdfGrid, points: ArrayLike, d_safe: float, resolution: float = 0.05) -> bool:
    pts = densify(points, resolution)
    d, _, oob = esdf.query_many(pts)
    return bool(np.all(d > d_safe) and not np.any(oob))


def shortcut(esdf: EsdfGrid, points: Vec, d_safe: float, resolution: float) -> Vec:
    """Greedy pruning: from each kept vertex jump to the farthest visible one."""
    keep = [0]
    i, n = 0, len(points)
    while i < n - 1:
        j = n - 1
        while j > i + 1 and not segment_clear(esdf, points[i], points[j], d_safe, resolution):
            j -= 1
        keep.append(j)
        i = j
    return points[keep]


def plan_rrt_star(
    esdf: EsdfGrid,
    start: ArrayLike,
    goal: Region,
    params: PlannerParams,
    rng: np.random.Generator,
) -> PlanResult:
    """RRT* from ``start`` until a node enters ``goal``.

    After the first region node is found the tree keeps growing for
    ``refine_iterations`` more samples (bounded by ``max_iterations``). The
    cheapest region node is backtracked, shortcut-pruned and densified.
    """
    start = np.asarray(start, dtype=float)
    res = params.check_resolution
    d0, _, oob = esdf.query(start)
    if oob or d0 <= params.d_safe:
        raise PlanningFailure(f"start {start.round(3).tolist()} is not collision-free (clearance {d0:.3f} m)")
    if goal.contains(start):
        p = Path([start, start.copy()])
        return PlanResult(p, 0, 1, p)

    lo = esdf.origin + 0.5 * esdf.voxel_size
    hi = esdf.upper - 0.5 * esdf.voxel_size
    if params.z_range is not None:
        lo = lo.copy()
        hi = hi.copy()
        lo[2] = max(lo[2], params.z_range[0])
        hi[2] = min(hi[2], params.z_range[1])

    cap = params.max_iterations + 1
    nodes = np.empty((cap, 3))
    cost = np.empty(cap)
    parent = np.full(cap, -1, dtype=np.int64)
    nodes[0], cost[0] = start, 0.0
    n = 1
    best_goal = -1
    stop_at = params.max_iterations
    it = 0
    for it in range(1, params.max_iterations + 1):
        if it > stop_at:
            break
        if rng.random() < params.goal_bias:
            sample = goal.center.copy()
        else:
            sample = rng.uniform(lo, hi)
        diff = nodes[:n] - sample
        dist2 = np.einsum("ij,ij->i", diff, diff)
        near_i = int(np.argmin(dist2))
        nearest = nodes[near_i]
        delta = sample - nearest
        dl = float(np.linalg.norm(delta))
        if dl < 1e-9:
            continue
        new = nearest + delta * min(1.0, params.step_size / dl)

        diff = nodes[:n] - new
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        near = np.nonzero(dist <= params.rewire_radius)[0]
        if near_i not in near:
            near = np.append(near, near_i)
        # choose parent: cheapest feasible among the near set
        order = near[np.argsort(cost[near] + dist[near], kind="stable")]
        chosen = -1
        for j in order:
            if segment_clear(esdf, nodes[j], new, params.d_safe, res):
                chosen = int(j)
                break
        if chosen < 0:
            continue
        k = n
        nodes[k] = new
        cost[k] = cost[chosen] + dist[chosen]
        parent[k] = chosen
        n += 1
        # rewire neighbours through the new node when cheaper
        for j in near:
            if j == chosen:
                continue
            c = cost[k] + dist[j]
            if c + 1e-12 < cost[j] and segment_clear(esdf, new, nodes[j], params.d_safe, res):
                shift = cost[j] - c
                parent[j] = k
                _propagate(parent, cost, n, int(j), shift)
        if goal.contains(new):
            if best_goal < 0:
                stop_at = min(params.max_iterations, it + params.refine_iterations)
            if best_goal < 0 or cost[k] < cost[best_goal]:
                best_goal = k

    if best_goal < 0:
        return PlanResult(None, it, n)
    # rewiring may have lowered another goal node's cost
    in_goal = [i for i in range(n) if goal.contains(nodes[i])]
    best_goal = min(in_goal, key=lambda i: cost[i])
    chain = []
    i = best_goal
    while i >= 0:
        chain.append(nodes[i])
        i = int(parent[i])
    raw = np.array(chain[::-1])
    pruned = shortcut(esdf, raw, params.d_safe, res)
    return PlanResult(Path(densify(pruned, params.max_segment)), it, n, Path(raw))


def _propagate(parent: NDArray[np.int64], cost: Vec, n: int, root: int, shift: float) -> None:
    cost[root] -= shift
    children: dict[int, list[int]] = {}
    for i in range(n):
        children.setdefault(int(parent[i]), []).append(i)
    queue = deque(children.get(root, []))
    while queue:
        i = queue.popleft()
        cost[i] -= shift
        queue.extend(children.get(i, []))


# ---------------------------------------------------------------------------
# path optimization


def path_cost(q: Vec, esdf: EsdfGrid, params: PlannerParams) -> tuple[float, Vec]:
    """Smoothness plus clearance penalty and its gradient w.r.t. all waypoints.

    The caller zeroes the endpoint rows when endpoints are fixed.
    """
    a = q[:-2] - 2.0 * q[1:-1] + q[2:]
    J = params.w_s * float(np.sum(a * a))
    g = np.zeros_like(q)
    g[:-2] += 2.0 * params.w_s * a
    g[1:-1] += -4.0 * params.w_s * a
    g[2:] += 2.0 * params.w_s * a
    inner = q[1:-1]
    if len(inner):
        d, grad_d, _ = esdf.query_many(inner)
        v = np.maximum(0.0, params.d_safe - d)
        J += params.w_c * float(np.sum(v * v))
        g[1:-1] += (-2.0 * params.w_c * v)[:, None] * grad_d
    return J, g


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    path: Path
    converged: bool
    iterations: int
    cost: float
    cost_history: tuple[float, ...] = field(default=())


def optimize_path(
    path: Path,
    esdf: EsdfGrid,
    params: PlannerParams,
    max_iter: int = 200,
    gtol: float = 1e-4,
    memory: int = 8,
) -> OptimizeResult:
    """L-BFGS on the interior waypoints with an Armijo backtracking line search.

    Every accepted iterate lowers the cost, so ``cost_history`` is
    non-increasing. Returns the last iterate with ``converged`` false when the
    iteration cap is hit first.
    """
    q = np.array(path.waypoints)
    if len(q) <= 2:
        J, _ = path_cost(q, esdf, params)
        return OptimizeResult(path, True, 0, J, (J,))
    free = slice(1, -1)

    def fg(x: Vec) -> tuple[float, Vec]:
        q[free] = x.reshape(-1, 3)
        J, g = path_cost(q, esdf, params)
        return J, g[free].ravel()

    x = q[free].ravel().copy()
    J, g = fg(x)
    history = [J]
    S: deque[Vec] = deque(maxlen=memory)
    Y: deque[Vec] = deque(maxlen=memory)
    converged = False
    it = 0
    for it in range(max_iter):
        if np.linalg.norm(g) < gtol:
            converged = True
            break
        # two-loop recursion
        r = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ r)
            r -= a * y
            alphas.append((a, rho, s, y))
        if S:
            s, y = S[-1], Y[-1]
            r *= float(s @ y) / float(y @ y)
        else:
            r *= 1.0 / max(1.0, float(np.linalg.norm(g)))
        for a, rho, s, y in reversed(alphas):
            b = rho * float(y @ r)
            r += (a - b) * s
        d = -r
        slope = float(g @ d)
        if slope >= 0.0:
            d, slope = -g, -float(g @ g)
            S.clear()
            Y.clear()
        step = 1.0
        accepted = False
        for _ in range(40):
            x_new = x + step * d
            J_new, g_new = fg(x_new)
            if J_new <= J + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            fg(x)
            break
        s, y = x_new - x, g_new - g
        if float(s @ y) > 1e-12:
            S.append(s)
            Y.append(y)
        x, J, g = x_new, J_new, g_new
        history.append(J)
    else:
        it = max_iter
        converged = bool(np.linalg.norm(g) < gtol)
    q[free] = x.reshape(-1, 3)
    return OptimizeResult(Path(q, path.fixed_endpoints), converged, it, J, tuple(history))


# ---------------------------------------------------------------------------
# reactive following


def repulsion(position: Vec, obstacles: Sequence[ObstacleEstimate], params: PlannerParams) -> Vec:
    """Sum of repulsive velocities from obstacles whose predicted box is inside the trigger."""
    v = np.zeros(3)
    rho0 = params.trigger_distance
    for ob in obstacles:
        pred = ob.predicted(params.horizon)
        d = pred.surface_distance(position)
        if d >= rho0:
            continue
        if d > 1e-6:
            away = (position - pred.closest_point(position)) / d
        else:
            away = position - pred.box_center
            away[2] = 0.0
            nrm = float(np.linalg.norm(away))
            away = away / nrm if nrm > 1e-9 else np.array([1.0, 0.0, 0.0])
            d = 1e-2
        v += params.k_rep * (1.0 / d - 1.0 / rho0) / (d * d) * away
    return v


def _lookahead_point(path: Path, index: int, distance: float) -> Vec:
    w = path.waypoints
    remaining = distance
    cur = w[index]
    for i in range(index, len(w) - 1):
        seg = w[i + 1] - cur
        L = float(np.linalg.norm(seg))
        if L >= remaining:
            return cur + seg * (remaining / L)
        remaining -= L
        cur = w[i + 1]
    return w[-1].copy()


def local_plan_step(
    position: ArrayLike,
    path: Path,
    progress: int,
    obstacles: Sequence[ObstacleEstimate],
    goal: Region,
    params: PlannerParams,
    window: int = 12,
) -> tuple[Vec, int]:
    """One tick of the potential-field follower; returns (velocity, progress).

    Far from the region the attraction aims at a lookahead point on the path.
    Once ``f(x) <= region_margin`` it points down ``-grad f`` instead,
    shrinking with ``f`` (floored at ``min_approach_fraction``) and vanishing
    inside the region.
    """
    x = np.asarray(position, dtype=float)
    w = path.waypoints
    hi = min(len(w), progress + window + 1)
    seg = w[progress:hi]
    progress = progress + int(np.argmin(np.linalg.norm(seg - x, axis=1)))

    f = goal.f(x)
    if f <= 0.0:
        v = np.zeros(3)
    elif f <= params.region_margin:
        grad = goal.gradient(x)
        scale = max(params.min_approach_fraction, min(1.0, f / params.region_margin))
        v = -params.k_att * scale * grad / float(np.linalg.norm(grad))
    else:
        target = _lookahead_point(path, progress, params.lookahead)
        v = params.k_att * (target - x)
    v = v + repulsion(x, obstacles, params)
    speed = float(np.linalg.norm(v))
    if speed > params.max_speed:
        v *= params.max_speed / speed
    return v, progress


def search_path(
    crude_center: ArrayLike,
    search_radius: float,
    altitude: float,
    n_points: int,
    entry: ArrayLike | None = None,
) -> list[tuple[Vec, float]]:
    """Evenly spaced circle waypoints about ``crude_center``, each yawed to face it.

    The list starts at the waypoint nearest ``entry`` and runs counter-clockwise.
    """
    if n_points < 4:
        raise ValueError("n_points must be >= 4")
    if not search_radius > 0.0:
        raise ValueError("search_radius must be > 0")
    c = np.asarray(crude_center, dtype=float)
    ang = 2.0 * np.pi * np.arange(n_points) / n_points
    if entry is not None:
        e = np.asarray(entry, dtype=float)
        a0 = math.atan2(e[1] - c[1], e[0] - c[0])
        k = int(np.argmin(np.abs(np.angle(np.exp(1j * (ang - a0))))))
        ang = np.roll(ang, -k)
    out = []
    for a in ang:
        p = np.array([c[0] + search_radius * math.cos(a), c[1] + search_radius * math.sin(a), altitude])
        out.append((p, math.atan2(c[1] - p[1], c[0] - p[0])))
    return out
