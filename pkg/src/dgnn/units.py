"""DGNN units: interact, time-adjusted update, merge, and the prop units.

All unit functions take a parameter view ``P`` mapping parameter names to
:class:`~dgnn.ndmath.Tensor`. Passing watched tensors (see
:meth:`ModelParams.tensors`) makes the whole event pipeline differentiable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import ndmath as nm
from .graph_store import GraphStore, Influenced, InteractionEvent, NodeState
from .ndmath import DimensionError, DomainError, Tensor

GATES = ("f", "i", "o", "c")
UPDATE_KEYS = ("W_d", "b_d") + tuple(f"{p}_{g}" for g in GATES for p in ("W", "U", "b"))
# (center role, neighbor role) -> prop transform name
PROP_KINDS = {("s", "s"): "prop.ss", ("s", "g"): "prop.sg", ("g", "s"): "prop.gs", ("g", "g"): "prop.gg"}


def _param_layout(d: int, n_classes: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "interact.W1": (d, d),
        "interact.W2": (d, d),
        "interact.b_e": (d,),
    }
    for unit in ("s_update", "g_update"):
        for k in UPDATE_KEYS:
            shapes[f"{unit}.{k}"] = (d,) if k.startswith("b") else (d, d)
    shapes.update({"merge.W_s": (d, d), "merge.W_g": (d, d), "merge.b_u": (d,)})
    for name in PROP_KINDS.values():
        shapes[name] = (d, d)
    shapes.update({"lp.P_s": (d, d), "lp.P_g": (d, d), "nc.W": (n_classes, d)})
    return shapes


@dataclass
class ModelParams:
    """Every learnable array of the model, keyed by dotted name."""

    arrays: dict[str, np.ndarray]
    d: int
    n_classes: int

    @classmethod
    def init(cls, d: int, n_classes: int = 2, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng((seed, 0x9A4A))
        bound = 1.0 / math.sqrt(d)
        arrays = {}
        for name, shape in _param_layout(d, n_classes).items():
            if len(shape) == 1:
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(arrays, d, n_classes)

    @classmethod
    def zeros(cls, d: int, n_classes: int = 2) -> "ModelParams":
        return cls({k: np.zeros(s) for k, s in _param_layout(d, n_classes).items()}, d, n_classes)

    def layout(self) -> dict[str, tuple[int, ...]]:
        return {k: a.shape for k, a in self.arrays.items()}

    def tensors(self, tape: nm.Tape | None = None) -> dict[str, Tensor]:
        if tape is None:
            return {k: Tensor(a) for k, a in self.arrays.items()}
        return {k: tape.watch(a) for k, a in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: a.copy() for k, a in self.arrays.items()}, self.d, self.n_classes)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, theta: np.ndarray) -> "ModelParams":
        out, pos = {}, 0
        for k, a in self.arrays.items():
            out[k] = np.asarray(theta[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return ModelParams(out, self.d, self.n_classes)

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())


def reciprocal_log(dt: float) -> float:
    return 1.0 / math.log(math.e + dt)


def reciprocal(dt: float) -> float:
    return 1.0 / (1.0 + dt)


DECAYS: dict[str, Callable[[float], float]] = {
    "reciprocal_log": reciprocal_log,
    "reciprocal": reciprocal,
}


@dataclass
class HyperParams:
    d: int = 64
    tau: float = 50.0
    act: str = "tanh"
    decay: str = "reciprocal_log"
    propagation: bool = True
    time_intervals: bool = True
    attention: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise DomainError(f"d must be >= 1, got {self.d}")
        if self.tau < 0:
            raise DomainError(f"tau must be >= 0, got {self.tau}")
        if self.act not in ("tanh", "sigmoid"):
            raise DomainError(f"unknown activation {self.act!r}")
        if self.decay not in DECAYS:
            raise DomainError(f"unknown decay {self.decay!r}")


# -- pure units ----------------------------------------------------------------


def decay_g(dt: float, kind: str = "reciprocal_log") -> float:
    if dt < 0:
        raise DomainError(f"negative time interval {dt}")
    return DECAYS[kind](dt)


def filter_h(dt: float, tau: float) -> int:
    return 1 if dt <= tau else 0


def effective_decay(dt: float, hp: HyperParams) -> float:
    if not hp.time_intervals:
        return 1.0
    return decay_g(dt, hp.decay)


def interact(u_src: Tensor, u_dst: Tensor, P: Mapping[str, Tensor], act: str = "tanh") -> Tensor:
    if u_src.shape != u_dst.shape:
        raise DimensionError(f"interact: {u_src.shape} vs {u_dst.shape}")
    z = nm.linear([(P["interact.W1"], u_src), (P["interact.W2"], u_dst)], P["interact.b_e"])
    return nm.tanh(z) if act == "tanh" else nm.sigmoid(z)


def time_adjust_cell(C: Tensor, dt: float, W_d: Tensor, b_d: Tensor, hp: HyperParams | None = None) -> Tensor:
    """Split C into short- and long-term parts and discount the short-term part by g(dt)."""
    g = effective_decay(dt, hp or HyperParams(d=C.shape[0]))
    short = nm.tanh(nm.linear([(W_d, C)], b_d))
    long_term = nm.sub(C, short)
    return nm.add(long_term, nm.scale(short, g))


def lstm_step(C_star: Tensor, h_prev: Tensor, e: Tensor, P: Mapping[str, Tensor], unit: str) -> tuple[Tensor, Tensor]:
    gates = [(P[f"{unit}.W_{g}"], P[f"{unit}.U_{g}"], P[f"{unit}.b_{g}"]) for g in GATES]
    out = nm.lstm_cell(C_star, h_prev, e, gates)
    return nm.row(out, 0), nm.row(out, 1)


def update(C: Tensor, h: Tensor, dt: float, e: Tensor, P: Mapping[str, Tensor], unit: str, hp: HyperParams):
    C_star = time_adjust_cell(C, dt, P[f"{unit}.W_d"], P[f"{unit}.b_d"], hp)
    return lstm_step(C_star, h, e, P, unit)


def merge(h_s: Tensor, h_g: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """Linear merge of the two role hidden states. Accepts vectors or row-stacked matrices."""
    if h_s.shape != h_g.shape:
        raise DimensionError(f"merge: {h_s.shape} vs {h_g.shape}")
    return nm.linear([(P["merge.W_s"], h_s), (P["merge.W_g"], h_g)], P["merge.b_u"])


def attention_weights(u_neighbors: list[Tensor], u_center: Tensor, enabled: bool = True) -> Tensor:
    n = len(u_neighbors)
    if n == 0:
        raise DomainError("attention over an empty neighbor list")
    if not enabled:
        return Tensor(np.full(n, 1.0 / n))
    return nm.softmax(nm.matvec(nm.stack(u_neighbors), u_center))


# -- propagation and the event pipeline -------------------------------------------


@dataclass
class PropContext:
    e: Tensor
    t: float
    center: object
    center_role: str
    neighbor_role: str
    neighbors: list[tuple[object, float]]
    pre_u: Mapping[object, Tensor]


@dataclass
class EventReport:
    propagated: list[tuple[object, str]] = field(default_factory=list)
    decays: list[float] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    influenced: Influenced | None = None


def prop_increments(ctx: PropContext, P: Mapping[str, Tensor], hp: HyperParams,
                    report: EventReport | None = None) -> tuple[list, Tensor | None]:
    """Cell-memory increments for the neighbors of one list that pass the filter.

    Returns the kept neighbor ids and a matrix with one increment row each.
    """
    if not ctx.neighbors:
        return [], None
    ids = [v for v, _ in ctx.neighbors]
    gaps = [ctx.t - tx for _, tx in ctx.neighbors]
    keep = [k for k, dt in enumerate(gaps) if filter_h(dt, hp.tau)]
    if not keep:
        return [], None
    # normalised over the whole role-neighbor list, before filtering
    weights = attention_weights([ctx.pre_u[v] for v in ids], ctx.pre_u[ctx.center], hp.attention)
    g = [effective_decay(gaps[k], hp) for k in keep]
    if report is not None:
        report.decays.extend(g)
        report.attention.append(weights.data.copy())
    if len(keep) < len(ids):
        weights = nm.gather(weights, keep)
    coef = nm.hadamard(weights, Tensor(g))
    msg = nm.matvec(P[PROP_KINDS[(ctx.center_role, ctx.neighbor_role)]], ctx.e)
    return [ids[k] for k in keep], nm.outer(coef, msg)


def apply_increments(store: GraphStore, role: str, parts: list[tuple[list, Tensor]], P: Mapping[str, Tensor],
                     report: EventReport | None = None) -> list[tuple[object, str, Tensor, Tensor]]:
    """Add summed increments to the role cell memories, then refresh h and u.

    The cell update is purely additive; h becomes tanh(C) and u is re-merged
    from the node's two current role hidden states.
    """
    parts = [(ids, inc) for ids, inc in parts if ids]
    if not parts:
        return []
    slot: dict = {}
    for ids, _ in parts:
        for v in ids:
            slot.setdefault(v, len(slot))
    nodes = list(slot)
    total = nm.scatter_add([inc for _, inc in parts], [[slot[v] for v in ids] for ids, _ in parts], len(nodes))
    other = "g" if role == "s" else "s"
    states = [store.state(v) for v in nodes]
    C_new = nm.add(nm.stack([getattr(st, f"C_{role}") for st in states]), total)
    H_new = nm.tanh(C_new)
    H_other = nm.stack([getattr(st, f"h_{other}") for st in states])
    U_new = merge(H_new, H_other, P) if role == "s" else merge(H_other, H_new, P)
    out = []
    for j, (v, st) in enumerate(zip(nodes, states)):
        c, h = nm.row(C_new, j), nm.row(H_new, j)
        fields = _fields(st)
        fields.update({f"C_{role}": c, f"h_{role}": h, "u": nm.row(U_new, j)})
        store.set_state(v, NodeState(**fields))
        out.append((v, role, c, h))
        if report is not None:
            report.propagated.append((v, role))
    return out


def propagate(ctx: PropContext, store: GraphStore, P: Mapping[str, Tensor], hp: HyperParams,
              report: EventReport | None = None) -> list[tuple[object, str, Tensor, Tensor]]:
    """Propagate e(t) from one center node to one of its role-neighbor lists."""
    kept, inc = prop_increments(ctx, P, hp, report)
    return apply_increments(store, ctx.neighbor_role, [(kept, inc)], P, report)


def _fields(st: NodeState) -> dict:
    return {
        "C_s": st.C_s, "h_s": st.h_s, "C_g": st.C_g, "h_g": st.h_g, "u": st.u,
        "last_event_time": st.last_event_time,
    }


def process_event(ev: InteractionEvent, store: GraphStore, P: Mapping[str, Tensor], hp: HyperParams,
                  report: EventReport | None = None) -> EventReport:
    store.check_order(ev.t)
    src_st = store.ensure_node(ev.src)
    dst_st = store.ensure_node(ev.dst)
    infl = store.influenced_nodes(ev)
    pre_u = {v: store.state(v).u for v in infl.node_ids()}
    pre_u[ev.src] = src_st.u
    pre_u[ev.dst] = dst_st.u
    report = report if report is not None else EventReport()
    report.influenced = infl

    e = interact(src_st.u, dst_st.u, P, hp.act)
    dt_src = 0.0 if src_st.last_event_time is None else ev.t - src_st.last_event_time
    dt_dst = 0.0 if dst_st.last_event_time is None else ev.t - dst_st.last_event_time
    C_s, h_s = update(src_st.C_s, src_st.h_s, dt_src, e, P, "s_update", hp)
    C_g, h_g = update(dst_st.C_g, dst_st.h_g, dt_dst, e, P, "g_update", hp)

    if ev.src == ev.dst:
        u = merge(h_s, h_g, P)
        store.set_state(ev.src, NodeState(C_s, h_s, C_g, h_g, u, ev.t))
    else:
        store.set_state(ev.src, NodeState(C_s, h_s, src_st.C_g, src_st.h_g, merge(h_s, src_st.h_g, P), ev.t))
        store.set_state(ev.dst, NodeState(dst_st.C_s, dst_st.h_s, C_g, h_g, merge(dst_st.h_s, h_g, P), ev.t))

    if hp.propagation:
        # attention reads only pre-event features, so increments that land on the
        # same (node, role) can be summed and applied once
        parts: dict[str, list] = {"s": [], "g": []}
        for center, c_role, n_role, lst in (
            (ev.src, "s", "s", infl.src_sources),
            (ev.src, "s", "g", infl.src_targets),
            (ev.dst, "g", "s", infl.dst_sources),
            (ev.dst, "g", "g", infl.dst_targets),
        ):
            ctx = PropContext(e, ev.t, center, c_role, n_role, lst, pre_u)
            parts[n_role].append(prop_increments(ctx, P, hp, report))
        for role in ("s", "g"):
            apply_increments(store, role, parts[role], P, report)

    store.add_event(ev)
    return report


def replay(events: Iterable[InteractionEvent], store: GraphStore, P: Mapping[str, Tensor], hp: HyperParams) -> GraphStore:
    for ev in events:
        process_event(ev, store, P, hp)
    return store
