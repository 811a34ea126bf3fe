"""Streaming dynamic graph neural network (DGNN) engine."""

from .graph_store import GraphStore, InteractionEvent, NodeState
from .ndmath import Tape, Tensor
from .units import HyperParams, ModelParams, process_event

__all__ = [
    "GraphStore",
    "HyperParams",
    "InteractionEvent",
    "ModelParams",
    "NodeState",
    "Tape",
    "Tensor",
    "process_event",
]
