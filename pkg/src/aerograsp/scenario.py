"""Scenario documents: JSON load/dump, validation and dotted-path overrides."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path as FsPath
from typing import Any, Mapping, Sequence

import numpy as np

from .arm import ArmParams
from .dynamics import CascadeGains, VehicleParams, x8_coaxial_layout
from .geometry import Pose, rot_x
from .perception import PerceptionParams
from .planning import PlannerParams
from .sensors import CameraIntrinsics, DynamicFeatureModel, MarkerDetectorParams
from .world import Bounds, BoxObstacle, Landmark, Pedestrian, Region, TargetObject, World

REQUIRED_KEYS = ("world_bounds", "boxes", "pedestrians", "landmarks", "target", "crude_region", "vehicle", "sensors", "dt", "seed")


class ScenarioError(ValueError):
    """Malformed or invalid scenario document; the message names the offending field."""


# body FLU -> optical (z forward, x right, y down)
_BODY_TO_OPTICAL = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class VehicleConfig:
    mass: float = 4.0
    inertia_diag: tuple[float, float, float] = (0.08, 0.08, 0.14)
    arm_length: float = 0.32
    rotor_gap: float = 0.08
    thrust_limit: float = 12.0
    torque_coefficient: float = 0.016
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_yaw: float = 0.0
    cruise_altitude: float = 1.2

    def params(self) -> VehicleParams:
        pos, spin = x8_coaxial_layout(self.arm_length, self.rotor_gap)
        return VehicleParams(
            mass=self.mass,
            inertia=np.diag(self.inertia_diag),
            rotor_positions=pos,
            rotor_spins=spin,
            thrust_limit=self.thrust_limit,
            torque_coefficient=self.torque_coefficient,
        )


@dataclass(frozen=True)
class BaseCameraConfig:
    # wide-angle lens (about 106 deg horizontal) so pedestrians crossing from the side are seen
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(fx=60.0, fy=60.0))
    position: tuple[float, float, float] = (0.18, 0.0, 0.02)
    tilt: float = 0.26  # downward pitch of the optical axis
    rate_hz: float = 10.0
    depth_sigma: float = 0.01
    landmark_sigma: float = 0.01
    dynamic_features: DynamicFeatureModel = field(default_factory=DynamicFeatureModel)
    detector_miss_rate: float = 0.0

    def mount(self) -> Pose:
        """Camera pose in the body frame."""
        return Pose.from_matrix(_BODY_TO_OPTICAL @ rot_x(-self.tilt), self.position)


@dataclass(frozen=True)
class EeCameraConfig:
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(min_range=0.03, max_range=3.0))
    rate_hz: float = 20.0
    pixel_sigma: float = 0.3
    marker: MarkerDetectorParams = field(default_factory=MarkerDetectorParams)


@dataclass(frozen=True)
class ImuConfig:
    accel_sigma: float = 0.05
    position_gain: float = 0.15
    velocity_gain: float = 0.15


@dataclass(frozen=True)
class SensorConfig:
    base_camera: BaseCameraConfig = field(default_factory=BaseCameraConfig)
    ee_camera: EeCameraConfig = field(default_factory=EeCameraConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)


@dataclass(frozen=True)
class MappingConfig:
    voxel_size: float = 0.05
    truncation: float = 2.0
    survey_heights: tuple[float, ...] = (0.5, 1.2, 2.0)
    survey_spacing: float = 3.0
    survey_yaws: int = 6


@dataclass(frozen=True)
class ServoConfig:
    gain: float = 0.8
    tolerance: float = 0.01
    damping: float = 1e-3
    desired_standoff: float = 0.10
    trigger_distance: float = 0.12
    ready_standoff: float = 0.15
    station_reach: float = 0.65
    station_drop: float = 0.12
    station_gain: float = 1.0
    constant_depth: bool = False
    grasp_pos_tol: float = 0.04
    grasp_ang_tol: float = 0.26


@dataclass(frozen=True)
class MissionConfig:
    control_divisor: int = 2
    time_cap: float = 180.0
    search_radius: float = 1.6
    search_points: int = 16
    search_revolutions: int = 2
    takeoff_tolerance: float = 0.1
    home_tolerance: float = 0.5
    estimation_timeout: float = 1.0
    obstacle_coast: float = 2.0
    servo_timeout: float = 40.0


_NESTED: dict[type, dict[str, type]] = {
    BaseCameraConfig: {"intrinsics": CameraIntrinsics, "dynamic_features": DynamicFeatureModel},
    EeCameraConfig: {"intrinsics": CameraIntrinsics, "marker": MarkerDetectorParams},
    SensorConfig: {"base_camera": BaseCameraConfig, "ee_camera": EeCameraConfig, "imu": ImuConfig},
}


def _build(cls: type, data: Any, where: str) -> Any:
    """Dataclass from a mapping: unknown keys are rejected, lists become tuples."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ScenarioError(f"{where}: expected an object")
    names = {f.name: f for f in fields(cls)}
    extra = set(data) - set(names)
    if extra:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(extra)}")
    kwargs = {}
    for k, v in data.items():
        sub = _NESTED.get(cls, {}).get(k)
        if sub is not None:
            kwargs[k] = _build(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            kwargs[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    bounds: Bounds
    boxes: tuple[BoxObstacle, ...]
    pedestrians: tuple[Pedestrian, ...]
    landmarks: tuple[Landmark, ...]
    target: TargetObject
    crude_region: Region
    vehicle: VehicleConfig
    sensors: SensorConfig
    dt: float
    seed: int
    planner: PlannerParams = field(default_factory=PlannerParams)
    perception: PerceptionParams = field(default_factory=PerceptionParams)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    servo: ServoConfig = field(default_factory=ServoConfig)
    mission: MissionConfig = field(default_factory=MissionConfig)
    world: World = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "world", World(self.bounds, list(self.boxes), list(self.pedestrians), list(self.landmarks), self.target)
        )

    @property
    def vehicle_params(self) -> VehicleParams:
        return self.vehicle.params()

    @property
    def arm_params(self) -> ArmParams:
        return ArmParams()

    @property
    def gains(self) -> CascadeGains:
        return CascadeGains()

    @property
    def start(self) -> np.ndarray:
        return np.array(self.vehicle.start, dtype=float)

    @property
    def goal_region(self) -> Region:
        """The crude region lifted to cruise altitude, as used by the planners."""
        c = np.array(self.crude_region.center)
        c[2] = self.vehicle.cruise_altitude
        return Region(c, self.crude_region.radius)

    def to_dict(self) -> dict[str, Any]:
        t = self.target
        doc = {
            "name": self.name,
            "world_bounds": {"lo": self.bounds.lo, "hi": self.bounds.hi},
            "boxes": [{"center": b.center, "half_extents": b.half_extents, "yaw": b.yaw} for b in self.boxes],
            "pedestrians": [
                {"waypoints": p.waypoints, "speed": p.speed, "radius": p.radius, "height": p.height, "loop": p.loop}
                for p in self.pedestrians
            ],
            "landmarks": [{"id": lm.id, "position": lm.position} for lm in self.landmarks],
            "target": {
                "position": t.pose.position,
                "orientation": t.pose.orientation,
                "radius": t.radius,
                "height": t.height,
                "marker_half_size": t.marker_half_size,
            },
            "crude_region": {"center": self.crude_region.center, "radius": self.crude_region.radius},
            "vehicle": asdict(self.vehicle),
            "sensors": asdict(self.sensors),
            "dt": self.dt,
            "seed": self.seed,
            "planner": asdict(self.planner),
            "perception": asdict(self.perception),
            "mapping": asdict(self.mapping),
            "servo": asdict(self.servo),
            "mission": asdict(self.mission),
        }
        return _plain(doc)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]


def _require(doc: Mapping, key: str, where: str = "") -> Any:
    if key not in doc:
        raise ScenarioError(f"missing required field '{where}{key}'")
    return doc[key]


def _vec(v: Any, where: str, n: int = 3) -> np.ndarray:
    try:
        a = np.asarray(v, dtype=float).reshape(n)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: expected {n} numbers") from exc
    if not np.all(np.isfinite(a)):
        raise ScenarioError(f"{where}: values must be finite")
    return a


def _guard(where: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ScenarioError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ScenarioError(f"{where}: {exc}") from exc


def from_dict(doc: Mapping[str, Any]) -> Scenario:
    """Validate a parsed document and build the Scenario."""
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a JSON object")
    for key in REQUIRED_KEYS:
        _require(doc, key)

    wb = doc["world_bounds"]
    bounds = _guard("world_bounds", Bounds, _vec(_require(wb, "lo", "world_bounds."), "world_bounds.lo"), _vec(_require(wb, "hi", "world_bounds."), "world_bounds.hi"))

    boxes = []
    for i, b in enumerate(doc["boxes"]):
        w = f"boxes[{i}]"
        boxes.append(_guard(w, BoxObstacle, _vec(_require(b, "center", w + "."), w + ".center"), _vec(_require(b, "half_extents", w + "."), w + ".half_extents"), float(b.get("yaw", 0.0))))

    peds = []
    for i, p in enumerate(doc["pedestrians"]):
        w = f"pedestrians[{i}]"
        peds.append(
            _guard(
                w,
                Pedestrian,
                np.asarray(_require(p, "waypoints", w + "."), dtype=float),
                float(_require(p, "speed", w + ".")),
                float(_require(p, "radius", w + ".")),
                float(_require(p, "height", w + ".")),
                bool(p.get("loop", True)),
            )
        )

    lms = []
    for i, lm in enumerate(doc["landmarks"]):
        w = f"landmarks[{i}]"
        lms.append(_guard(w, Landmark, int(_require(lm, "id", w + ".")), _vec(_require(lm, "position", w + "."), w + ".position")))
    ids = [lm.id for lm in lms]
    if len(set(ids)) != len(ids):
        raise ScenarioError("landmarks: ids must be unique")

    t = doc["target"]
    pos = _vec(_require(t, "position", "target."), "target.position")
    if "orientation" in t:
        pose = _guard("target.orientation", Pose, pos, _vec(t["orientation"], "target.orientation", 4))
    else:
        pose = Pose.from_yaw(pos, float(t.get("yaw", 0.0)))
    target = _guard(
        "target",
        TargetObject,
        pose,
        float(_require(t, "radius", "target.")),
        float(_require(t, "height", "target.")),
        float(_require(t, "marker_half_size", "target.")),
    )
    if not bounds.contains(target.pose.position):
        raise ScenarioError("target: pose must lie inside world_bounds")

    cr = doc["crude_region"]
    region = _guard("crude_region", Region, _vec(_require(cr, "center", "crude_region."), "crude_region.center"), float(_require(cr, "radius", "crude_region.")))

    try:
        dt = float(doc["dt"])
    except (TypeError, ValueError) as exc:
        raise ScenarioError("dt: expected a number") from exc
    if not dt > 0.0 or not math.isfinite(dt):
        raise ScenarioError("dt: must be > 0")
    if dt > 0.05:
        raise ScenarioError("dt: must be <= 0.05 s")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ScenarioError("seed: must be a non-negative integer")

    vehicle = _build(VehicleConfig, doc["vehicle"], "vehicle")
    _guard("vehicle", vehicle.params)
    sensors = _build(SensorConfig, doc["sensors"], "sensors")
    planner_doc = dict(doc.get("planner") or {})
    if isinstance(planner_doc.get("z_range"), list):
        planner_doc["z_range"] = tuple(planner_doc["z_range"])
    return Scenario(
        name=str(doc.get("name", "scenario")),
        bounds=bounds,
        boxes=tuple(boxes),
        pedestrians=tuple(peds),
        landmarks=tuple(lms),
        target=target,
        crude_region=region,
        vehicle=vehicle,
        sensors=sensors,
        dt=dt,
        seed=seed,
        planner=_build(PlannerParams, planner_doc, "planner"),
        perception=_build(PerceptionParams, doc.get("perception"), "perception"),
        mapping=_build(MappingConfig, doc.get("mapping"), "mapping"),
        servo=_build(ServoConfig, doc.get("servo"), "servo"),
        mission=_build(MissionConfig, doc.get("mission"), "mission"),
    )


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b.c=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text:
        raise ScenarioError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ScenarioError(f"override {text!r}: empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(doc: Mapping[str, Any], overrides: Sequence[str] | Mapping[str, Any] | None) -> dict[str, Any]:
    """Copy of ``doc`` with dotted-path assignments applied; list indices are numeric parts."""
    out = copy.deepcopy(dict(doc))
    if not overrides:
        return out
    items = overrides.items() if isinstance(overrides, Mapping) else (parse_override(o) for o in overrides)
    for key, value in items:
        parts = key.split(".")
        node: Any = out
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                node = node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return out


def loads(text: str, overrides: Sequence[str] | Mapping[str, Any] | None = None) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(apply_overrides(doc, overrides))


def load_scenario(path: str | FsPath, overrides: Sequence[str] | Mapping[str, Any] | None = None) -> Scenario:
    return loads(FsPath(path).read_text(), overrides)


def dumps(scenario: Scenario) -> str:
    return json.dumps(scenario.to_dict(), indent=2, sort_keys=True)


def dump_scenario(scenario: Scenario, path: str | FsPath) -> None:
    FsPath(path).write_text(dumps(scenario) + "\n")


def reference_scenario_path() -> FsPath:
    return FsPath(str(resources.files("aerograsp") / "data" / "reference_scenario.json"))


def reference_document() -> dict[str, Any]:
    return json.loads(reference_scenario_path().read_text())


def reference_scenario(overrides: Sequence[str] | Mapping[str, Any] | None = None) -> Scenario:
    return from_dict(apply_overrides(reference_document(), overrides))
