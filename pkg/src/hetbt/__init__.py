"""Behavior-tree coordination for heterogeneous robot teams."""

from .bt_core import BehaviorTree, NodeStatus, bt_extension, bt_melt, tick
from .coordination import run_mission
from .capability_library import default_library, load_library
from .planning import AssignmentDecision, Mode, OraclePlanner, backward_chain
from .world import Predicate, WorldState, load_scenario, parse_predicate

__version__ = "0.1.0"

__all__ = [
    "AssignmentDecision",
    "BehaviorTree",
    "Mode",
    "NodeStatus",
    "OraclePlanner",
    "Predicate",
    "WorldState",
    "backward_chain",
    "bt_extension",
    "bt_melt",
    "default_library",
    "load_library",
    "load_scenario",
    "parse_predicate",
    "run_mission",
    "tick",
]
