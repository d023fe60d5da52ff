"""Coordinator/node protocol for building the pooled dataset across sites."""

from .coordinator import Coordinator, CoordinatorConfig
from .messages import COORDINATOR, Message
from .node import Node
from .transport import Faults, InProcessNetwork, Session, SocketEndpoint, Transcript, run_coordinator, run_node, run_session

__all__ = [
    "COORDINATOR",
    "Coordinator",
    "CoordinatorConfig",
    "Faults",
    "InProcessNetwork",
    "Message",
    "Node",
    "Session",
    "SocketEndpoint",
    "Transcript",
    "run_coordinator",
    "run_node",
    "run_session",
]
