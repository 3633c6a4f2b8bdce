"""Threshold-crypto secure stateful IPv6 autoconfiguration for ad hoc networks."""

from .addressing import BlockLayout, SiteLocalAddress, compose_address, decompose_address
from .node import NodeMachine, NodeState, ProtocolConfig, Timers

__all__ = [
    "BlockLayout",
    "NodeMachine",
    "NodeState",
    "ProtocolConfig",
    "SiteLocalAddress",
    "Timers",
    "compose_address",
    "decompose_address",
]

__version__ = "0.1.0"
