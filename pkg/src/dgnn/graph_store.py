"""Evolving temporal graph: node registry, role neighbor maps, node states."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Hashable, NamedTuple

import numpy as np

from .ndmath import Tensor

SECONDS_PER_DAY = 86400.0

NodeId = Hashable


class OrderingError(ValueError):
    def __init__(self, previous: float, current: float):
        super().__init__(f"event at t={current} precedes last applied event at t={previous}")
        self.previous = previous
        self.current = current


class UnknownNodeError(KeyError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    src: NodeId
    dst: NodeId
    t: float


@dataclass
class NodeState:
    C_s: Tensor
    h_s: Tensor
    C_g: Tensor
    h_g: Tensor
    u: Tensor
    last_event_time: float | None = None

    def detached(self) -> "NodeState":
        return replace(
            self,
            C_s=self.C_s.detach(),
            h_s=self.h_s.detach(),
            C_g=self.C_g.detach(),
            h_g=self.h_g.detach(),
            u=self.u.detach(),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).data for k in ("C_s", "h_s", "C_g", "h_g", "u")}


class Influenced(NamedTuple):
    """Role neighbor lists of the two interacting nodes, as of just before an event.

    ``src_sources`` holds nodes that have sent to the source node, ``src_targets``
    nodes the source node has sent to, and likewise for the target node.
    """

    src_sources: list[tuple[NodeId, float]]
    src_targets: list[tuple[NodeId, float]]
    dst_sources: list[tuple[NodeId, float]]
    dst_targets: list[tuple[NodeId, float]]

    def node_ids(self) -> set:
        return {n for lst in self for n, _ in lst}


@dataclass
class GraphStore:
    d: int
    seed: int = 0
    init_scale: float = 0.1
    states: dict = field(default_factory=dict)
    # sources[v][u] = last time of u -> v ; targets[v][u] = last time of v -> u
    sources: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    last_time: float | None = None

    def __post_init__(self):
        self.rng = np.random.default_rng((self.seed, 0x57A7E))

    # -- nodes -----------------------------------------------------------------

    def __contains__(self, v) -> bool:
        return v in self.states

    def __len__(self) -> int:
        return len(self.states)

    @property
    def nodes(self) -> list:
        return list(self.states)

    def ensure_node(self, v) -> NodeState:
        st = self.states.get(v)
        if st is None:
            a = self.init_scale
            draw = self.rng.uniform(-a, a, size=(5, self.d))
            st = NodeState(*(Tensor(r) for r in draw))
            self.states[v] = st
            self.sources[v] = {}
            self.targets[v] = {}
        return st

    def state(self, v) -> NodeState:
        try:
            return self.states[v]
        except KeyError:
            raise UnknownNodeError(v) from None

    def set_state(self, v, st: NodeState) -> None:
        if v not in self.states:
            raise UnknownNodeError(v)
        self.states[v] = st

    def detach_all(self) -> None:
        for v, st in self.states.items():
            self.states[v] = st.detached()

    def snapshot(self) -> dict:
        """Deep copy of every state array plus adjacency, for diffing."""
        return {
            v: ({k: a.copy() for k, a in st.arrays().items()}, st.last_event_time)
            for v, st in self.states.items()
        }

    def features(self) -> dict:
        return {v: st.u.data.copy() for v, st in self.states.items()}

    # -- adjacency ---------------------------------------------------------------

    def check_order(self, t: float) -> None:
        if self.last_time is not None and t < self.last_time:
            raise OrderingError(self.last_time, t)

    def add_event(self, ev: InteractionEvent) -> None:
        self.check_order(ev.t)
        self.ensure_node(ev.src)
        self.ensure_node(ev.dst)
        self.targets[ev.src][ev.dst] = ev.t
        self.sources[ev.dst][ev.src] = ev.t
        self.last_time = ev.t

    def influenced_nodes(self, ev: InteractionEvent) -> Influenced:
        skip = {ev.src, ev.dst}

        def pick(table, v):
            return [(n, t) for n, t in table.get(v, {}).items() if n not in skip]

        return Influenced(
            pick(self.sources, ev.src),
            pick(self.targets, ev.src),
            pick(self.sources, ev.dst),
            pick(self.targets, ev.dst),
        )

    def neighbors(self, v) -> set:
        return set(self.sources.get(v, ())) | set(self.targets.get(v, ()))
