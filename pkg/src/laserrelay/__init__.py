"""Joint power and trajectory design for a laser-charged UAV relay."""

from .scenario import (
    LaserParams,
    PowerSchedule,
    Scenario,
    ScenarioError,
    Trajectory,
    Weather,
    f_EE,
    f_PE,
)

__all__ = [
    "LaserParams",
    "PowerSchedule",
    "Scenario",
    "ScenarioError",
    "Trajectory",
    "Weather",
    "f_EE",
    "f_PE",
]

__version__ = "0.1.0"
