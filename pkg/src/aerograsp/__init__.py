"""Simulated aerial manipulator that flies to a target region, servos onto a
marker with its arm camera, grasps a cylinder and brings it home."""

from .episode import BatchSummary, EpisodeReport, compute_localization_stats, run_batch, run_episode
from .mission import Mission, MissionState, Phase
from .scenario import Scenario, ScenarioError, load_scenario, loads, reference_scenario

__all__ = [
    "BatchSummary",
    "EpisodeReport",
    "Mission",
    "MissionState",
    "Phase",
    "Scenario",
    "ScenarioError",
    "compute_localization_stats",
    "load_scenario",
    "loads",
    "reference_scenario",
    "run_batch",
    "run_episode",
]

__version__ = "0.1.0"
