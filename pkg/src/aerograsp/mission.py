"""Mission state machine: takeoff, global plan, follow with avoidance, search,
visual servo, grasp and transport back to the start."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import NDArray

from .arm import ArmParams, camera_pose_in_base, inverse_kinematics
from .dynamics import Setpoint
from .geometry import Pose, wrap_angle
from .mapping import EsdfGrid
from .perception import ObstacleEstimate
from .planning import (
    Path,
    PlanningFailure,
    local_plan_step,
    optimize_path,
    plan_rrt_star,
    search_path,
)
from .scenario import Scenario
from .sensors import FeatureObservation
from .servo import (
    NormalizedFeatures,
    ServoState,
    desired_features,
    estimate_marker_pose,
    grasp_trigger,
    ibvs_step,
    normalize_features,
    split_command,
)
from .world import Region

Vec = NDArray[np.float64]

# body FLU axes -> optical camera axes looking along body +x
_FORWARD_OPTICAL = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
# distance from static geometry at which the follower may no longer close in
_STATIC_STOP = 0.25


class Phase(str, Enum):
    TAKEOFF = "Takeoff"
    GLOBAL_PLAN = "GlobalPlan"
    FOLLOW = "Follow"
    SEARCH = "Search"
    SERVO = "Servo"
    GRASP = "Grasp"
    TRANSPORT = "Transport"
    DONE = "Done"
    FAILED = "Failed"


ALLOWED: dict[Phase, frozenset[Phase]] = {
    Phase.TAKEOFF: frozenset({Phase.GLOBAL_PLAN}),
    Phase.GLOBAL_PLAN: frozenset({Phase.FOLLOW}),
    Phase.FOLLOW: frozenset({Phase.SEARCH, Phase.SERVO}),
    Phase.SEARCH: frozenset({Phase.SERVO}),
    Phase.SERVO: frozenset({Phase.GRASP, Phase.SEARCH}),
    Phase.GRASP: frozenset({Phase.TRANSPORT}),
    Phase.TRANSPORT: frozenset({Phase.DONE}),
    Phase.DONE: frozenset(),
    Phase.FAILED: frozenset(),
}


class TransitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class MissionState:
    phase: Phase
    reason: str = ""

    @property
    def terminal(self) -> bool:
        return self.phase in (Phase.DONE, Phase.FAILED)

    @property
    def label(self) -> str:
        return f"Failed({self.reason})" if self.phase is Phase.FAILED else self.phase.value

    def to(self, phase: Phase, reason: str = "") -> MissionState:
        """Next state; any live state may fail, otherwise only documented edges."""
        if self.terminal:
            raise TransitionError(f"{self.label} is terminal")
        if phase is not Phase.FAILED and phase not in ALLOWED[self.phase]:
            raise TransitionError(f"{self.phase.value} -> {phase.value} is not a mission transition")
        return MissionState(phase, reason)


@dataclass(frozen=True, eq=False)
class Observation:
    """What the mission sees on one control tick."""

    t: float
    position: Vec  # navigation estimate, world frame
    velocity: Vec
    rotation: Vec  # attitude (AHRS)
    estimate_age: float  # seconds since the last vision fix
    obstacles: tuple[ObstacleEstimate, ...] = ()
    marker: FeatureObservation | None = None
    ee_frame: bool = False
    q: Vec = field(default_factory=lambda: np.zeros(6))
    grasp_ok: bool | None = None
    fault: str = ""


@dataclass(frozen=True, eq=False)
class Command:
    setpoint: Setpoint | None
    q_des: Vec | None
    gripper: str = "open"
    servo: dict | None = None
    planned: Path | None = None


class Mission:
    """Owns the mission state and every planner/servo sub-state between ticks."""

    def __init__(self, scenario: Scenario, esdf: EsdfGrid, rng: np.random.Generator) -> None:
        self.sc = scenario
        self.esdf = esdf
        self.rng = rng
        self.arm: ArmParams = scenario.arm_params
        self.dt = scenario.dt * scenario.mission.control_divisor
        self.ee_dt = 1.0 / scenario.sensors.ee_camera.rate_hz
        self.intr = scenario.sensors.ee_camera.intrinsics
        self.state = MissionState(Phase.TAKEOFF)
        self.history: list[tuple[float, str]] = [(0.0, self.state.label)]
        self.cruise = scenario.vehicle.cruise_altitude
        start = scenario.start
        self.home = np.array([start[0], start[1], self.cruise])
        self.hold = np.array(self.home)
        self.yaw_cmd = scenario.vehicle.start_yaw
        self.carrot: Vec | None = None
        self.path: Path | None = None
        self.goal: Region | None = None
        self.progress = 0
        self.sub = ""
        self.settle_since: float | None = None
        self.sub_t0 = 0.0
        self.q_fly = self._solve_fly_pose()
        self.q_des = np.array(self.q_fly)
        self.search: list[tuple[Vec, float]] = []
        self.search_idx = 0
        self.search_visits = 0
        self.servo: ServoState | None = None
        self.station: Vec | None = None
        self.station_yaw = 0.0
        self.marker_fixes: list[Pose] = []
        self.last_features: NormalizedFeatures | None = None
        self.lost_since: float | None = None
        self.q_grasp: Vec | None = None
        self.gripper = "open"
        self.transport_goal = Region(self.home, 0.4)
        self.planned_paths: list[Path] = []

    # ------------------------------------------------------------------ helpers

    def _go(self, t: float, phase: Phase, reason: str = "", sub: str = "") -> None:
        self.state = self.state.to(phase, reason)
        self.history.append((round(t, 6), self.state.label))
        self.sub, self.sub_t0 = sub, t
        self.settle_since = None

    def _fail(self, t: float, reason: str) -> None:
        self._go(t, Phase.FAILED, reason)

    def _camera_target_in_body(self, standoff: float) -> Pose:
        s = self.sc.servo
        r = self.sc.target.radius
        return Pose.from_matrix(_FORWARD_OPTICAL, [s.station_reach - r - standoff, 0.0, -s.station_drop])

    def _ik_for_camera(self, cam_in_body: Pose, seed: Vec) -> Vec | None:
        ee_body = cam_in_body.compose(self.arm.camera_mount.inverse())
        ee_base = self.arm.mount.inverse().compose(ee_body)
        res = inverse_kinematics(ee_base, seed, self.arm, pos_tol=1e-3, ang_tol=1e-2)
        return res.q if res.success else None

    def _solve_fly_pose(self) -> Vec:
        seed = np.radians([0.0, -34.0, -122.0, 0.0, 66.0, -90.0])
        q = self._ik_for_camera(self._camera_target_in_body(self.sc.servo.ready_standoff), seed)
        if q is None:
            raise ValueError("ready arm pose is not reachable with the configured station geometry")
        return q

    def _move_carrot(self, x: Vec, goal: Vec, speed: float) -> tuple[Vec, Vec]:
        if self.carrot is None:
            self.carrot = np.array(x)
        step = goal - self.carrot
        n = float(np.linalg.norm(step))
        lim = speed * self.dt
        if n > lim:
            step *= lim / n
        self.carrot = self.carrot + step
        return self.carrot, step / self.dt

    def _turn_towards(self, yaw: float, rate: float = 0.8) -> float:
        d = wrap_angle(yaw - self.yaw_cmd)
        lim = rate * self.dt
        self.yaw_cmd = wrap_angle(self.yaw_cmd + max(-lim, min(lim, d)))
        return self.yaw_cmd

    def _marker_world(self, obs: Observation, feats: NormalizedFeatures) -> Pose:
        body = Pose.from_matrix(obs.rotation, obs.position)
        cam = body.compose(camera_pose_in_base(obs.q, self.arm))
        return cam.compose(estimate_marker_pose(feats, self.sc.target.marker_half_size))

    def _plan(self, t: float, start: Vec, goal: Region) -> Path | None:
        try:
            res = plan_rrt_star(self.esdf, start, goal, self.sc.planner, self.rng)
        except PlanningFailure:
            return None
        if not res.success:
            return None
        opt = optimize_path(res.path, self.esdf, self.sc.planner)
        self.planned_paths.append(opt.path)
        return opt.path

    def _static_guard(self, x: Vec, v: Vec) -> Vec:
        """Limit the speed towards static geometry so a pedestrian dodge cannot
        push the vehicle into a wall; the allowed closing speed falls to zero
        at ``_STATIC_STOP`` from the nearest surface."""
        d, g, outside = self.esdf.query(x)
        n = float(np.linalg.norm(g))
        if outside or n < 1e-9 or d >= self.sc.planner.d_safe:
            return v
        g = g / n
        closing = -float(v @ g)
        allowed = max(0.0, d - _STATIC_STOP) * 2.0
        if closing > allowed:
            v = v + (closing - allowed) * g
        return v

    def _follow(self, obs: Observation, goal: Region) -> Setpoint:
        assert self.path is not None
        x = obs.position
        v, self.progress = local_plan_step(x, self.path, self.progress, obs.obstacles, goal, self.sc.planner)
        v = self._static_guard(x, v)
        if self.carrot is None:
            self.carrot = np.array(x)
        self.carrot = self.carrot + v * self.dt
        lag = self.carrot - x
        n = float(np.linalg.norm(lag))
        if n > 0.5:
            self.carrot = x + lag * (0.5 / n)
        w = self.path.waypoints
        ahead = w[min(self.progress + 4, len(w) - 1)] - x
        if math.hypot(ahead[0], ahead[1]) > 0.3:
            self._turn_towards(math.atan2(ahead[1], ahead[0]))
        return Setpoint(np.array(self.carrot), self.yaw_cmd, v)

    # ------------------------------------------------------------------ step

    def step(self, obs: Observation) -> Command:
        t = obs.t
        if self.state.terminal:
            return Command(None, None, self.gripper)
        if obs.fault:
            self._fail(t, obs.fault)
            return Command(None, None, self.gripper)
        if obs.estimate_age > self.sc.mission.estimation_timeout:
            self._fail(t, "estimation")
            return Command(None, None, self.gripper)
        phase = self.state.phase
        handler = {
            Phase.TAKEOFF: self._takeoff,
            Phase.GLOBAL_PLAN: self._global_plan,
            Phase.FOLLOW: self._follow_phase,
            Phase.SEARCH: self._search,
            Phase.SERVO: self._servo,
            Phase.GRASP: self._grasp,
            Phase.TRANSPORT: self._transport,
        }[phase]
        cmd = handler(obs)
        if self.state.terminal:
            return Command(None, None, self.gripper)
        return cmd

    def _hold(self, obs: Observation, servo: dict | None = None) -> Command:
        return Command(Setpoint(np.array(self.hold), self.yaw_cmd), self.q_des, self.gripper, servo)

    def _takeoff(self, obs: Observation) -> Command:
        goal = np.array([self.sc.start[0], self.sc.start[1], self.cruise])
        sp, vel = self._move_carrot(obs.position, goal, 0.6)
        if abs(obs.position[2] - self.cruise) <= self.sc.mission.takeoff_tolerance:
            self.hold = np.array(obs.position)
            self._go(obs.t, Phase.GLOBAL_PLAN)
        return Command(Setpoint(np.array(sp), self.yaw_cmd, vel), self.q_des, self.gripper)

    def _global_plan(self, obs: Observation) -> Command:
        goal = self.sc.goal_region
        start = np.array(obs.position)
        path = self._plan(obs.t, start, goal)
        if path is None:
            self._fail(obs.t, "plan")
            return self._hold(obs)
        self.path, self.goal, self.progress = path, goal, 0
        self.carrot = np.array(obs.position)
        self._go(obs.t, Phase.FOLLOW)
        cmd = self._hold(obs)
        return Command(cmd.setpoint, cmd.q_des, cmd.gripper, planned=path)

    def _follow_phase(self, obs: Observation) -> Command:
        assert self.goal is not None
        if obs.marker is not None:
            self._enter_servo(obs)
            return self._hold(obs)
        if self.goal.contains(obs.position):
            self.search = search_path(
                self.sc.crude_region.center, self.sc.mission.search_radius, self.cruise,
                self.sc.mission.search_points, obs.position,
            )
            self.search_idx, self.search_visits = 0, 0
            self.hold = np.array(obs.position)
            self._go(obs.t, Phase.SEARCH)
            return self._hold(obs)
        return Command(self._follow(obs, self.goal), self.q_des, self.gripper)

    def _search(self, obs: Observation) -> Command:
        if obs.marker is not None:
            self._enter_servo(obs)
            return self._hold(obs)
        m = self.sc.mission
        if self.search_visits >= m.search_points * m.search_revolutions:
            self._fail(obs.t, "search")
            return self._hold(obs)
        p, yaw = self.search[self.search_idx]
        sp, vel = self._move_carrot(obs.position, p, 0.5)
        self._turn_towards(yaw)
        if np.linalg.norm(obs.position - p) < 0.25 and abs(wrap_angle(obs_yaw(obs) - yaw)) < 0.2:
            self.search_idx = (self.search_idx + 1) % len(self.search)
            self.search_visits += 1
        return Command(Setpoint(np.array(sp), self.yaw_cmd, vel), self.q_des, self.gripper)

    # ------------------------------------------------------------------ servo

    def _enter_servo(self, obs: Observation) -> None:
        self._go(obs.t, Phase.SERVO, sub="approach")
        self.marker_fixes = []
        self.servo = None
        self.lost_since = None
        self._set_station(obs, normalize_features(obs.marker, self.intr))

    def _set_station(self, obs: Observation, feats: NormalizedFeatures, fixed_axis: bool = False) -> None:
        """Station from a marker sighting; the approach axis averages recent
        sightings and stays frozen once the arm starts servoing."""
        marker = self._marker_world(obs, feats)
        s = self.sc.servo
        if not fixed_axis:
            self.marker_fixes = (self.marker_fixes + [marker])[-20:]
            axis = np.mean([m.rotation[:, 2] for m in self.marker_fixes], axis=0)
            self.station_yaw = math.atan2(axis[1], axis[0])
        c, sn = math.cos(self.station_yaw), math.sin(self.station_yaw)
        grasp = marker.position + self.sc.target.radius * np.array([c, sn, 0.0])
        offset = np.array([c * s.station_reach, sn * s.station_reach, -s.station_drop])
        self.station = grasp - offset

    def _servo(self, obs: Observation) -> Command:
        assert self.station is not None
        s = self.sc.servo
        self._turn_towards(self.station_yaw)
        if obs.t - self.sub_t0 > self.sc.mission.servo_timeout and self.sub != "ibvs":
            self._fail(obs.t, "servo timeout")
            return self._hold(obs)
        if obs.ee_frame:
            if obs.marker is None:
                if self.lost_since is None:
                    self.lost_since = obs.t
                elif obs.t - self.lost_since > 1.0:
                    return self._abort_to_search(obs)
            else:
                self.lost_since = None

        if self.sub == "approach":
            if obs.marker is not None and obs.ee_frame:
                self._set_station(obs, normalize_features(obs.marker, self.intr))
            sp, vel = self._move_carrot(obs.position, self.station, 0.5)
            self.q_des = np.array(self.q_fly)
            near = (
                np.linalg.norm(obs.position - self.station) < 0.02
                and np.linalg.norm(obs.velocity) < 0.05
                and abs(wrap_angle(obs_yaw(obs) - self.station_yaw)) < 0.05
            )
            # a momentary pass through the window at an overshoot peak does not count
            self.settle_since = (self.settle_since if self.settle_since is not None else obs.t) if near else None
            if near and obs.t - self.settle_since >= 0.5:
                self.hold = np.array(self.station)
                self.carrot = np.array(self.station)
                self.sub, self.sub_t0 = "ibvs", obs.t
                self.servo = ServoState(
                    desired_features(self.sc.target.marker_half_size, s.desired_standoff),
                    gain=s.gain, tolerance=s.tolerance, damping=s.damping, constant_depth=s.constant_depth,
                )
                self.q_des = np.array(obs.q)
            return Command(Setpoint(np.array(sp), self.yaw_cmd, vel), self.q_des, self.gripper)

        # ibvs: the vehicle holds the station, the arm absorbs the correction
        record = None
        if obs.ee_frame and obs.marker is not None:
            assert self.servo is not None
            feats = normalize_features(obs.marker, self.intr)
            # keep station relative to the marker: the station seen through the
            # navigation estimate carries the same drift as the estimate itself
            self._set_station(obs, feats, fixed_axis=True)
            self.hold = self.hold + s.station_gain * (self.station - self.hold)
            twist, self.servo = ibvs_step(feats, self.servo)
            _, qd = split_command(twist, obs.q, self.arm)
            self.q_des = self.arm.clip(self.q_des + qd * self.ee_dt)
            decision = grasp_trigger(feats, self.servo, self.sc.target.marker_half_size, s.trigger_distance)
            self.last_features = feats
            record = {
                "features": feats.vector.tolist(),
                "error": self.servo.last_error.tolist(),
                "twist": twist.tolist(),
                "qdot": qd.tolist(),
                "standoff": decision.standoff,
                "converged": self.servo.converged,
            }
            if decision.fire:
                self._start_grasp(obs, feats)
        if obs.t - self.sub_t0 > self.sc.mission.servo_timeout:
            self._fail(obs.t, "servo timeout")
        return self._hold(obs, record)

    def _abort_to_search(self, obs: Observation) -> Command:
        self.search = search_path(
            self.sc.crude_region.center, self.sc.mission.search_radius, self.cruise,
            self.sc.mission.search_points, obs.position,
        )
        self.search_idx, self.search_visits = 0, 0
        self.q_des = np.array(self.q_fly)
        self.carrot = np.array(obs.position)
        self._go(obs.t, Phase.SEARCH)
        return self._hold(obs)

    def _start_grasp(self, obs: Observation, feats: NormalizedFeatures) -> None:
        # gripper goal in the arm base frame: the marker frame pushed back to the cylinder axis
        marker_cam = estimate_marker_pose(feats, self.sc.target.marker_half_size)
        from .arm import forward_kinematics

        cam_base = forward_kinematics(obs.q, self.arm.dh).compose(self.arm.camera_mount)
        goal = cam_base.compose(marker_cam).compose(Pose([0.0, 0.0, self.sc.target.radius]))
        res = inverse_kinematics(goal, obs.q, self.arm, pos_tol=1e-3, ang_tol=1e-2)
        self._go(obs.t, Phase.GRASP, sub="reach")
        if not res.success:
            self._fail(obs.t, "grasp unreachable")
            return
        self.q_grasp = res.q
        self.q_des = np.array(res.q)

    def _grasp(self, obs: Observation) -> Command:
        assert self.q_grasp is not None
        if self.sub == "reach":
            done = float(np.max(np.abs(obs.q - self.q_grasp))) < 0.005
            if done or obs.t - self.sub_t0 > 5.0:
                self.gripper = "closed"
                self.sub, self.sub_t0 = "close", obs.t
            return self._hold(obs)
        if obs.grasp_ok is None:
            return self._hold(obs)
        if not obs.grasp_ok:
            self._fail(obs.t, "grasp")
            return self._hold(obs)
        self.gripper = "holding"
        self.q_des = np.array(self.q_fly)
        self._go(obs.t, Phase.TRANSPORT, sub="retreat")
        axis = np.array([math.cos(self.station_yaw), math.sin(self.station_yaw), 0.0])
        self.retreat = np.array(self.hold) - 0.8 * axis
        self.retreat[2] = self.cruise
        self.carrot = np.array(obs.position)
        return self._hold(obs)

    def _transport(self, obs: Observation) -> Command:
        if self.sub == "retreat":
            sp, vel = self._move_carrot(obs.position, self.retreat, 0.4)
            if np.linalg.norm(obs.position - self.retreat) < 0.15:
                path = self._plan(obs.t, np.array(obs.position), self.transport_goal)
                if path is None:
                    self._fail(obs.t, "plan")
                    return self._hold(obs)
                self.path, self.goal, self.progress = path, self.transport_goal, 0
                self.sub = "follow"
                return Command(Setpoint(np.array(sp), self.yaw_cmd, vel), self.q_des, self.gripper, planned=path)
            return Command(Setpoint(np.array(sp), self.yaw_cmd, vel), self.q_des, self.gripper)
        if np.linalg.norm(obs.position - self.home) <= self.sc.mission.home_tolerance:
            self._go(obs.t, Phase.DONE)
            return Command(None, None, self.gripper)
        return Command(self._follow(obs, self.transport_goal), self.q_des, self.gripper)


def obs_yaw(obs: Observation) -> float:
    R = obs.rotation
    return math.atan2(R[1, 0], R[0, 0])
