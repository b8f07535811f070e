"""Microscopic free-flow traffic simulation with a pluggable control layer."""

from .dynamics import Simulation, W99Params, car_following_accel, steady_flow
from .metrics import METRIC_NAMES, MetricsReport, write_report
from .network import ScenarioConfig, ScenarioError, build_network, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "METRIC_NAMES",
    "MetricsReport",
    "ScenarioConfig",
    "ScenarioError",
    "Simulation",
    "W99Params",
    "__version__",
    "build_network",
    "car_following_accel",
    "parse_scenario",
    "steady_flow",
    "write_report",
]
