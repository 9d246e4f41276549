"""Fixed-step episode loop, batch runs, logs, reports and localization statistics."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path as FsPath
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .arm import (
    JointGains,
    ManipulatorState,
    arm_com,
    camera_pose_in_base,
    coupling_wrench,
    gripper_pose_in_base,
    joint_servo_step,
)
from .dynamics import (
    ControllerState,
    RigidBodyState,
    SimulationFault,
    WrenchCommand,
    allocate_rotors,
    cascade_pid_step,
    step_dynamics,
    wrench_from_rotors,
)
from .geometry import Pose, matrix_to_euler, quat_from_rotvec, quat_to_matrix, rotvec_from_matrix
from .mapping import EsdfGrid, VoxelGrid, compute_esdf, survey_map
from .mission import Command, Mission, Observation, Phase
from .planning import repulsion
from .perception import (
    EstimationError,
    ObstacleEstimate,
    correspondences_from,
    estimate_pose,
    extract_obstacles,
    track_obstacles,
)
from .scenario import Scenario, apply_overrides, from_dict
from .sensors import apply_detector, depth_to_pointcloud, observe_landmarks, observe_marker, render_depth
from .servo import grasp_check
from .world import World, pedestrian_pose_at, static_distance

Vec = NDArray[np.float64]

ANGLE_ROWS = ("Roll", "Pitch", "Yaw")
AXIS_ROWS = ("X", "Y", "Z")

# boxes whose bottom lies below this height are treated as standing on the ground
_GROUND_BAND = 0.3


# ---------------------------------------------------------------------------
# prior map, shared by every episode on the same static world

_MAP_CACHE: dict[str, tuple[VoxelGrid, EsdfGrid]] = {}


def _static_key(sc: Scenario) -> str:
    d = sc.to_dict()
    keep = {k: d[k] for k in ("world_bounds", "boxes", "target", "mapping")}
    return json.dumps(keep, sort_keys=True)


def prior_map(sc: Scenario) -> tuple[VoxelGrid, EsdfGrid]:
    """Occupancy grid and ESDF of the static world, memoised per process."""
    key = _static_key(sc)
    hit = _MAP_CACHE.get(key)
    if hit is None:
        m = sc.mapping
        grid = survey_map(sc.world, m.voxel_size, m.survey_heights, m.survey_spacing, m.survey_yaws)
        hit = (grid, compute_esdf(grid, m.truncation))
        _MAP_CACHE[key] = hit
    return hit


# ---------------------------------------------------------------------------
# navigation filter


@dataclass
class NavFilter:
    """Alpha-beta position/velocity filter driven by the accelerometer and
    corrected by vision fixes; attitude is propagated with the gyro and pulled
    toward each vision fix."""

    position: Vec
    velocity: Vec
    rotation: Vec
    position_gain: float
    velocity_gain: float
    last_fix: float = 0.0

    def predict(self, acc_world: Vec, omega_body: Vec, dt: float) -> None:
        self.position = self.position + self.velocity * dt + 0.5 * acc_world * dt * dt
        self.velocity = self.velocity + acc_world * dt
        self.rotation = self.rotation @ quat_to_matrix(quat_from_rotvec(omega_body * dt))

    def correct(self, fix: Pose, t: float) -> None:
        r = fix.position - self.position
        self.position = self.position + self.position_gain * r
        self.velocity = self.velocity + self.velocity_gain * r
        dR = rotvec_from_matrix(self.rotation.T @ fix.rotation)
        self.rotation = self.rotation @ quat_to_matrix(quat_from_rotvec(self.position_gain * dR))
        self.last_fix = t


def vision_fix(
    world: World, body: Pose, mount: Pose, sc: Scenario, t: float, rng: np.random.Generator, reject_dynamic: bool
) -> Pose | None:
    """Body pose from one base-camera landmark frame, or None if it cannot be fixed."""
    bc = sc.sensors.base_camera
    cam = body.compose(mount)
    obs = observe_landmarks(world, cam, bc.intrinsics, t, bc.landmark_sigma, rng, bc.dynamic_features)
    try:
        est = estimate_pose(correspondences_from(obs), reject_dynamic=reject_dynamic, timestamp=t)
    except EstimationError:
        return None
    return est.pose.compose(mount.inverse())


# ---------------------------------------------------------------------------
# logs and statistics


def _r(v: Any, nd: int = 6) -> Any:
    if isinstance(v, (float, np.floating)):
        return round(float(v), nd)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_r(x, nd) for x in v]
    return v


def pose_record(position: ArrayLike, rotation: ArrayLike) -> dict[str, list[float]]:
    return {"p": _r(np.asarray(position, dtype=float)), "rpy": _r(list(matrix_to_euler(rotation)))}


@dataclass(frozen=True)
class ErrorRow:
    average: float
    max: float


@dataclass(frozen=True)
class LocalizationStats:
    """Average and max absolute error for X, Y, Z (m) and Roll, Pitch, Yaw (rad).

    Angles are ZYX Euler angles of the body attitude; yaw differences are wrapped.
    """

    rows: dict[str, ErrorRow]
    samples: int

    def to_dict(self) -> dict[str, Any]:
        return {"samples": self.samples, **{k: asdict(v) for k, v in self.rows.items()}}

    def table(self) -> str:
        lines = [f"{'':6s}{'Average Error':>15s}{'Max Error':>12s}"]
        for k, row in self.rows.items():
            lines.append(f"{k:6s}{row.average:15.4f}{row.max:12.4f}")
        return "\n".join(lines)


def compute_localization_stats(log: Iterable[Mapping[str, Any]] | str | FsPath) -> LocalizationStats:
    """Table of estimate-vs-truth errors over every record carrying both poses."""
    if isinstance(log, (str, FsPath)):
        log = read_log(log)
    est, tru = [], []
    for rec in log:
        e, g = rec.get("estimate"), rec.get("truth")
        if e is None or g is None:
            continue
        est.append(list(e["p"]) + list(e["rpy"]))
        tru.append(list(g["p"]) + list(g["rpy"]))
    if not est:
        raise ValueError("log has no paired estimate/truth samples")
    return _stats(np.array(est), np.array(tru))


def _stats(est: Vec, tru: Vec) -> LocalizationStats:
    err = np.abs(est - tru)
    err[:, 3:] = np.abs((err[:, 3:] + np.pi) % (2.0 * np.pi) - np.pi)
    rows = {
        name: ErrorRow(float(err[:, i].mean()), float(err[:, i].max()))
        for i, name in enumerate(AXIS_ROWS + ANGLE_ROWS)
    }
    return LocalizationStats(rows, len(est))


def read_log(path: str | FsPath) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EpisodeReport:
    seed: int
    outcome: str  # "success" | "failure"
    reason: str
    grasp_achieved: bool
    localization: dict[str, Any]
    min_pedestrian_distance: float  # m, vehicle center to pedestrian surface
    min_static_distance: float
    path_length: float  # m flown
    sim_duration: float
    wall_clock: float = field(default=0.0, compare=False)
    final_state: str = ""
    transitions: tuple[tuple[float, str], ...] = ()
    repulsion_violations: int = 0

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        # wall-clock time varies between identical runs; it stays out of the
        # deterministic document unless asked for
        d = asdict(self)
        d["transitions"] = [list(x) for x in self.transitions]
        if not include_timing:
            d.pop("wall_clock")
        return d


@dataclass(frozen=True)
class BatchSummary:
    runs: int
    successes: int
    base_seed: int
    reports: tuple[EpisodeReport, ...]

    @property
    def rate(self) -> float:
        return self.successes / self.runs

    @property
    def success_label(self) -> str:
        return f"{self.successes}/{self.runs}"

    def to_dict(self) -> dict[str, Any]:
        ped = [r.min_pedestrian_distance for r in self.reports]
        return {
            "runs": self.runs,
            "successes": self.successes,
            "success_rate": self.rate,
            "success_label": self.success_label,
            "base_seed": self.base_seed,
            "min_pedestrian_distance": {"min": min(ped), "mean": float(np.mean(ped))},
            "failures": {str(r.seed): r.reason for r in self.reports if not r.success},
            "episodes": [r.to_dict() for r in self.reports],
        }


# ---------------------------------------------------------------------------
# episode loop


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def pedestrian_surface_distance(world: World, point: Vec, t: float) -> float:
    """Distance from ``point`` to the nearest pedestrian cylinder (inf without pedestrians)."""
    best = math.inf
    for ped in world.pedestrians:
        c = pedestrian_pose_at(ped, t).position
        radial = max(math.hypot(point[0] - c[0], point[1] - c[1]) - ped.radius, 0.0)
        vertical = max(c[2] - point[2], point[2] - (c[2] + ped.height), 0.0)
        best = min(best, math.hypot(radial, vertical))
    return best


def _vertical_span(o: ObstacleEstimate) -> tuple[float, float]:
    reach = float(np.abs(o.axes[2]) @ o.half_extents)
    return o.box_center[2] - reach, o.box_center[2] + reach


def _keep_tallest(cur: ObstacleEstimate, prev: ObstacleEstimate | None) -> ObstacleEstimate:
    """Guard a track against views clipped by the image border.

    Close to the camera a walker's head leaves the frame and the cluster
    shrinks from the top, so the box sinks and its centroid falls. Obstacles
    standing on the ground keep the tallest box seen so far and move only
    horizontally.
    """
    low, high = _vertical_span(cur)
    if low > _GROUND_BAND:
        return cur
    vel = np.array([cur.velocity[0], cur.velocity[1], 0.0])
    if prev is None or high >= _vertical_span(prev)[1]:
        return replace(cur, velocity=vel)
    lift = np.array([0.0, 0.0, prev.box_center[2] - cur.box_center[2]])
    return replace(
        cur,
        box_center=cur.box_center + lift,
        centroid=np.array([cur.centroid[0], cur.centroid[1], prev.centroid[2]]),
        half_extents=prev.half_extents,
        axes=prev.axes,
        velocity=vel,
    )


class _ObstacleTracker:
    def __init__(self, coast: float) -> None:
        self.coast = coast
        self.tracks: list[ObstacleEstimate] = []
        self.next_id = 0
        self.last_t: float | None = None

    def update(self, current: list[ObstacleEstimate], t: float) -> None:
        dt = t - self.last_t if self.last_t is not None else 0.1
        fresh = track_obstacles(self.tracks, current, max(dt, 1e-3), next_id=self.next_id)
        prev = {o.track_id: o for o in self.tracks}
        fresh = [_keep_tallest(o, prev.get(o.track_id)) for o in fresh]
        self.next_id = max([self.next_id - 1] + [o.track_id for o in fresh]) + 1
        seen = {o.track_id for o in fresh}
        old = [o for o in self.tracks if o.track_id not in seen and t - o.timestamp <= self.coast]
        self.tracks = fresh + old
        self.last_t = t

    def at(self, t: float) -> tuple[ObstacleEstimate, ...]:
        live = [o for o in self.tracks if t - o.timestamp <= self.coast]
        return tuple(o.predicted(t - o.timestamp) for o in live)


def _prepare(scenario: Scenario | Mapping[str, Any], seed: int | None, overrides: Any) -> Scenario:
    doc = scenario.to_dict() if isinstance(scenario, Scenario) else dict(scenario)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    return from_dict(doc)


def run_episode(
    scenario: Scenario | Mapping[str, Any],
    seed: int | None = None,
    overrides: Sequence[str] | Mapping[str, Any] | None = None,
    log_path: str | FsPath | None = None,
    keep_log: bool = False,
) -> tuple[EpisodeReport, list[dict[str, Any]] | None]:
    """Run one mission to Done, Failed or the time cap.

    Returns the report and, when ``keep_log`` is set, the list of log records.
    The result is a pure function of (scenario, seed, overrides).
    """
    wall0 = time.perf_counter()
    sc = _prepare(scenario, seed, overrides)
    world = sc.world
    _, esdf = prior_map(sc)
    rng_plan, rng_imu, rng_land, rng_depth, rng_det, rng_marker = _streams(sc.seed, 6)

    vp, gains, arm = sc.vehicle_params, sc.gains, sc.arm_params
    bc, ee, imu = sc.sensors.base_camera, sc.sensors.ee_camera, sc.sensors.imu
    mount = bc.mount()
    dt = sc.dt
    div = sc.mission.control_divisor
    ctrl_dt = dt * div
    base_every = max(1, int(round(1.0 / (bc.rate_hz * dt))))
    ee_every = max(1, int(round(1.0 / (ee.rate_hz * dt))))
    cap_steps = int(round(sc.mission.time_cap / dt))

    state = RigidBodyState.at(sc.start, sc.vehicle.start_yaw)
    ctrl = ControllerState()
    mission = Mission(sc, esdf, rng_plan)
    manip = ManipulatorState(np.array(mission.q_fly), limits=arm.joint_limits)
    jgains = JointGains()
    nav = NavFilter(np.array(state.position), np.zeros(3), state.rotation, imu.position_gain, imu.velocity_gain)
    tracker = _ObstacleTracker(sc.mission.obstacle_coast)
    com_hist = [arm_com(manip.q, arm)] * 3
    disturbance = None
    wrench = None
    cmd: Command | None = None
    marker_obs = None
    ee_frame = False
    close_time: float | None = None
    fault = ""

    records: list[dict[str, Any]] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    min_ped, min_static, flown = math.inf, math.inf, 0.0
    rep_viol = 0
    pairs: list[list[float]] = []
    vision_rec: dict[str, Any] | None = None

    try:
        for k in range(cap_steps + 1):
            t = k * dt
            # sensors
            if k % base_every == 0:
                body = state.pose
                fix = vision_fix(world, body, mount, sc, t, rng_land, sc.perception.reject_dynamic)
                if fix is not None:
                    nav.correct(fix, t)
                cam = body.compose(mount)
                obstacles = _perceive(world, cam, sc, t, rng_depth, rng_det)
                tracker.update(obstacles, t)
                vision_rec = {"fix": fix is not None, "obstacles": len(obstacles)}
            if k % ee_every == 0:
                cam = state.pose.compose(camera_pose_in_base(manip.q, arm))
                marker_obs = observe_marker(world, cam, ee.intrinsics, t, ee.pixel_sigma, rng_marker, ee.marker)
                ee_frame = True

            if k % div == 0:
                grasp_ok = None
                if mission.gripper == "closed":
                    close_time = t if close_time is None else close_time
                    if t - close_time >= 0.5:
                        g = state.pose.compose(gripper_pose_in_base(manip.q, arm))
                        grasp_ok = grasp_check(g, sc.target, sc.servo.grasp_pos_tol, sc.servo.grasp_ang_tol)
                obs = Observation(
                    t=t,
                    position=np.array(nav.position),
                    velocity=np.array(nav.velocity),
                    rotation=state.rotation,
                    estimate_age=t - nav.last_fix,
                    obstacles=tracker.at(t),
                    marker=marker_obs if ee_frame else None,
                    ee_frame=ee_frame,
                    q=np.array(manip.q),
                    grasp_ok=grasp_ok,
                    fault=fault,
                )
                if k == cap_steps and not mission.state.terminal:
                    mission.state = mission.state.to(Phase.FAILED, "timeout")
                    mission.history.append((round(t, 6), mission.state.label))
                    cmd = Command(None, None, mission.gripper)
                else:
                    cmd = mission.step(obs)
                ee_frame = False
                marker_obs = None

                # repulsion must stay silent outside the trigger distance
                if cmd.setpoint is not None and obs.obstacles:
                    h = sc.planner.horizon
                    d_obs = min(o.predicted(h).surface_distance(obs.position) for o in obs.obstacles)
                    if d_obs > sc.planner.trigger_distance:
                        if np.any(repulsion(obs.position, obs.obstacles, sc.planner)):
                            rep_viol += 1

                d_ped = pedestrian_surface_distance(world, state.position, t)
                d_sta = float(static_distance(world, state.position))
                min_ped, min_static = min(min_ped, d_ped), min(min_static, d_sta)
                rec = {
                    "t": round(t, 6),
                    "state": mission.state.label,
                    "truth": pose_record(state.position, state.rotation),
                    "estimate": pose_record(nav.position, nav.rotation),
                    "cmd": None
                    if cmd.setpoint is None
                    else {
                        "p": _r(cmd.setpoint.position),
                        "yaw": _r(cmd.setpoint.yaw),
                        "q": _r(cmd.q_des),
                        "gripper": cmd.gripper,
                    },
                    "min_ped": _r(d_ped) if math.isfinite(d_ped) else None,
                    "min_static": _r(d_sta),
                }
                if vision_rec is not None:
                    rec["vision"] = vision_rec
                    vision_rec = None
                if cmd.servo is not None:
                    rec["servo"] = _r(cmd.servo)
                if cmd.planned is not None:
                    rec["plan"] = {"waypoints": len(cmd.planned.waypoints), "length": _r(cmd.planned.length)}
                pairs.append(rec["estimate"]["p"] + rec["estimate"]["rpy"] + rec["truth"]["p"] + rec["truth"]["rpy"])
                if fh is not None:
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
                if keep_log:
                    records.append(rec)
                if mission.state.terminal:
                    break

                # actuators at the control rate
                if cmd.q_des is not None:
                    manip = joint_servo_step(cmd.q_des, manip, jgains, arm.rate_limits, ctrl_dt)
                manip = replace(manip, gripper=cmd.gripper)
                com_hist = com_hist[1:] + [arm_com(manip.q, arm)]
                cw = coupling_wrench(com_hist, ctrl_dt, arm.mass)
                # static arm weight about the body center plus the reaction to its motion
                g_body = state.rotation.T @ np.array([0.0, 0.0, -vp.gravity * arm.mass])
                force = cw.force + g_body
                disturbance = type(cw)(force, np.cross(com_hist[-1], force))
                if cmd.setpoint is not None:
                    nav_state = RigidBodyState(nav.position, state.orientation, nav.velocity, state.angular_velocity)
                    wc, ctrl = cascade_pid_step(cmd.setpoint, nav_state, gains, vp, ctrl_dt, ctrl)
                    # feed forward the arm's static weight and its moment about the body center
                    w_arm = arm.mass * vp.gravity * state.rotation[2]
                    wc = WrenchCommand(
                        max(wc.thrust + arm.mass * vp.gravity / max(state.rotation[2, 2], 0.5), 0.0),
                        wc.moments + np.cross(com_hist[-1], w_arm),
                    )
                    rotors, _ = allocate_rotors(wc, vp)
                    wrench = wrench_from_rotors(rotors, vp)

            # plant
            if wrench is not None:
                new = step_dynamics(state, wrench, vp, dt, disturbance)
            else:
                new = state
            if new.position[2] < 0.0:
                p = np.array(new.position)
                p[2] = 0.0
                v = np.array(new.velocity)
                v[2] = max(v[2], 0.0)
                new = RigidBodyState(p, new.orientation, v, new.angular_velocity)
            flown += float(np.linalg.norm(new.position - state.position))
            acc = (new.velocity - state.velocity) / dt
            acc_meas = acc + rng_imu.standard_normal(3) * imu.accel_sigma
            nav.predict(acc_meas, new.angular_velocity, dt)
            state = new
            if static_distance(world, state.position) < 0.0:
                fault = "collision"
    except SimulationFault:
        if not mission.state.terminal:
            mission.state = mission.state.to(Phase.FAILED, "fault")
            mission.history.append((round(k * dt, 6), mission.state.label))
    finally:
        if fh is not None:
            fh.close()

    final = mission.state
    done = final.phase is Phase.DONE
    P = np.array(pairs)
    loc = _stats(P[:, :6], P[:, 6:]) if len(P) else None
    report = EpisodeReport(
        seed=sc.seed,
        outcome="success" if done else "failure",
        reason="" if done else final.reason,
        grasp_achieved=mission.gripper == "holding",
        localization=loc.to_dict() if loc is not None else {},
        min_pedestrian_distance=_r(min_ped) if math.isfinite(min_ped) else -1.0,
        min_static_distance=_r(min_static),
        path_length=_r(flown),
        sim_duration=_r(max(mission.history[-1][0], dt)),
        wall_clock=time.perf_counter() - wall0,
        final_state=final.label,
        transitions=tuple(mission.history),
        repulsion_violations=rep_viol,
    )
    return report, (records if keep_log else None)


def _perceive(
    world: World, cam: Pose, sc: Scenario, t: float, rng_depth: np.random.Generator, rng_det: np.random.Generator
) -> list[ObstacleEstimate]:
    bc = sc.sensors.base_camera
    reach = sc.perception.max_range + 1.0
    near = [
        ped for ped in world.pedestrians
        if np.linalg.norm(pedestrian_pose_at(ped, t).position[:2] - cam.position[:2]) <= reach
    ]
    if not near:
        return []
    img = render_depth(world, cam, bc.intrinsics, t, bc.depth_sigma, rng_depth)
    img, _ = apply_detector(img, bc.detector_miss_rate, rng_det)
    cloud = depth_to_pointcloud(img, bc.intrinsics, cam)
    return extract_obstacles(cloud, sc.perception, cam.position, t)



def run_batch(
    scenario: Scenario | Mapping[str, Any],
    n_runs: int,
    base_seed: int = 0,
    overrides: Sequence[str] | Mapping[str, Any] | None = None,
    out_dir: str | FsPath | None = None,
    progress: Any = None,
) -> BatchSummary:
    """Episodes with seeds ``base_seed .. base_seed + n_runs - 1``, merged in seed order."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    out = FsPath(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in range(base_seed, base_seed + n_runs):
        log = out / f"episode_{seed}.jsonl" if out is not None else None
        rep, _ = run_episode(scenario, seed, overrides, log_path=log)
        reports.append(rep)
        if progress is not None:
            progress(rep)
    summary = BatchSummary(n_runs, sum(r.success for r in reports), base_seed, tuple(reports))
    if out is not None:
        (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
        timing = {str(r.seed): round(r.wall_clock, 3) for r in reports}
        (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return summary
