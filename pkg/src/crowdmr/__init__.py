"""crowdmr: fault-tolerant master/worker map-reduce for distributed crowd counting."""

__version__ = "0.1.0"

from .domain import CompositeKey, TagCategory, VisitorEvent, parse_category
from .mapreduce import sequential_oracle
from .membership import ClusterConfig, Role, is_eligible, select_leader
from .reporting import CycleReport
from .simnet import LinkModel, ScenarioSpec, generate_stream, run_scenario
from .storage import ReportLog

__all__ = [
    "ClusterConfig",
    "CompositeKey",
    "CycleReport",
    "LinkModel",
    "ReportLog",
    "Role",
    "ScenarioSpec",
    "TagCategory",
    "VisitorEvent",
    "generate_stream",
    "is_eligible",
    "parse_category",
    "run_scenario",
    "select_leader",
    "sequential_oracle",
]
