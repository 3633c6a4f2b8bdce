"""Deterministic discrete-event simulation of the protocol over a radio network."""

from .adversary import inject_adversary
from .delays import DelayModel
from .events import EventQueue
from .metrics import JoinRecord, Metrics
from .mobility import MobilityModel, RandomWaypoint, step_mobility
from .runner import Simulation, run_scenario
from .topology import Topology, flood_tree, next_hop

__all__ = [
    "DelayModel",
    "EventQueue",
    "JoinRecord",
    "Metrics",
    "MobilityModel",
    "RandomWaypoint",
    "Simulation",
    "Topology",
    "flood_tree",
    "inject_adversary",
    "next_hop",
    "run_scenario",
    "step_mobility",
]
