"""Losses, temporal mini-batching, truncated BPTT and optimizers."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ndmath as nm
from .graph_store import GraphStore, InteractionEvent
from .ndmath import DimensionError, DomainError, NumericError, Tensor
from .units import HyperParams, ModelParams, process_event

logger = logging.getLogger(__name__)

TASKS = ("link_prediction", "node_classification")


class SamplingError(ValueError):
    pass


class TrainingAbort(NumericError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 200
    q: int = 5
    lr: float = 1e-3
    epochs: int = 1
    optimizer: str = "adam"
    seed: int = 0
    task: str = "link_prediction"
    labeled_fraction: float = 1.0
    literal_negatives: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.q < 0:
            raise DomainError("q must be >= 0")
        if not self.lr >= 0:
            raise DomainError("lr must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.task not in TASKS:
            raise DomainError(f"unknown task {self.task!r}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise DomainError("labeled_fraction must lie in (0, 1]")


# -- losses --------------------------------------------------------------------


def project_lp(u: Tensor, role: str, P: Mapping[str, Tensor]) -> Tensor:
    if role not in ("source", "target"):
        raise DomainError(f"role must be 'source' or 'target', got {role!r}")
    return nm.matvec(P["lp.P_s" if role == "source" else "lp.P_g"], u)


def lp_loss(u_src: Tensor, u_dst: Tensor, u_negs: Sequence[Tensor], P: Mapping[str, Tensor],
            literal: bool = False) -> Tensor:
    """Negative-sampling loss of one interaction from pre-event general features.

    ``literal=True`` keeps the sign of the negative scores inside the sigmoid
    instead of the usual ``log sigmoid(-score)``.
    """
    zs = project_lp(u_src, "source", P)
    targets = project_lp(nm.stack([u_dst, *u_negs]), "target", P)
    scores = nm.matvec(targets, zs)
    if u_negs and not literal:
        sign = np.ones(len(u_negs) + 1)
        sign[1:] = -1.0
        scores = nm.hadamard(scores, Tensor(sign))
    return nm.scale(nm.total(nm.log_sigmoid(scores)), -1.0)


def nc_loss(u: Tensor, y: int | Sequence[float], P: Mapping[str, Tensor]) -> Tensor:
    W = P["nc.W"]
    n_classes = W.shape[0]
    if isinstance(y, (int, np.integer)):
        if not 0 <= y < n_classes:
            raise DimensionError(f"label {y} outside [0, {n_classes})")
        cls = int(y)
    else:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (n_classes,):
            raise DimensionError(f"one-hot length {y.shape} does not match {n_classes} classes")
        cls = int(np.argmax(y))
    return nm.scale(nm.index(nm.log_softmax(nm.matvec(W, u)), cls), -1.0)


def sample_negatives(candidates: Sequence, q: int, rng: np.random.Generator, exclude=None) -> list:
    pool = [c for c in candidates if c != exclude] if exclude is not None else list(candidates)
    if q == 0:
        return []
    if not pool:
        raise SamplingError("no negative candidates left after excluding the positive target")
    picks = rng.integers(0, len(pool), size=q)
    return [pool[i] for i in picks]


def make_minibatches(events: Sequence[InteractionEvent], batch_size: int) -> list[list[InteractionEvent]]:
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    return [list(events[i : i + batch_size]) for i in range(0, len(events), batch_size)]


def batch_candidates(batch: Sequence[InteractionEvent], store: GraphStore) -> list:
    """Interacting nodes of the batch plus every node any of them neighbors at batch start.

    This is exactly the union of the interacting and influenced nodes over the
    batch, because neighbors gained inside the batch are batch nodes already.
    """
    seen: dict = {}
    for ev in batch:
        seen.setdefault(ev.src, None)
        seen.setdefault(ev.dst, None)
    for v in list(seen):
        for n in sorted(store.neighbors(v), key=_order_key):
            seen.setdefault(n, None)
    return list(seen)


def _order_key(v):
    return (0, v, "") if isinstance(v, (int, np.integer)) else (1, 0, str(v))


# -- optimizers ------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, kind: str = "adam") -> "OptimizerState":
        st = cls(kind=kind)
        if kind == "adam":
            st.m = {k: np.zeros_like(a) for k, a in params.arrays.items()}
            st.v = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return st


def optimizer_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    for k, g in grads.items():
        if g.shape != params.arrays[k].shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, expected {params.arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    state.step += 1
    if state.kind == "sgd":
        for k, g in grads.items():
            params.arrays[k] -= lr * g
        return
    b1, b2, t = state.beta1, state.beta2, state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        params.arrays[k] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- batch losses ----------------------------------------------------------------


def lp_batch(batch: Sequence[InteractionEvent], store: GraphStore, P: Mapping[str, Tensor], hp: HyperParams,
             q: int, rng: np.random.Generator, literal: bool = False) -> Tensor:
    """Summed link-prediction loss of a batch, processing its events in order.

    Each event's loss is read from the features just before that event is
    applied; the event is processed afterwards.
    """
    candidates = batch_candidates(batch, store)
    for ev in batch:
        store.ensure_node(ev.src)
        store.ensure_node(ev.dst)
    negatives = [sample_negatives(candidates, q, rng, exclude=ev.dst) for ev in batch]
    terms = []
    for ev, negs in zip(batch, negatives):
        u_negs = [store.state(n).u for n in negs]
        terms.append(lp_loss(store.state(ev.src).u, store.state(ev.dst).u, u_negs, P, literal))
        process_event(ev, store, P, hp)
    return nm.add_scalars(terms)


def nc_batch(batch: Sequence[InteractionEvent], store: GraphStore, P: Mapping[str, Tensor], hp: HyperParams,
             labels: Mapping, train_nodes: set) -> tuple[Tensor, int]:
    involved: dict = {}
    for ev in batch:
        report = process_event(ev, store, P, hp)
        involved.setdefault(ev.src, None)
        involved.setdefault(ev.dst, None)
        for v in report.influenced.node_ids():
            involved.setdefault(v, None)
    targets = [v for v in involved if v in train_nodes]
    terms = [nc_loss(store.state(v).u, labels[v], P) for v in targets]
    return nm.add_scalars(terms), len(terms)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    events_per_sec: float
    store: GraphStore | None = None


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def train_epoch(events: Sequence[InteractionEvent], params: ModelParams, hp: HyperParams, cfg: TrainConfig,
                opt_state: OptimizerState, epoch: int = 0, labels: Mapping | None = None,
                train_nodes: set | None = None) -> EpochMetrics:
    """One pass over the stream from freshly initialised node states.

    Node states are detached at every batch boundary, so gradients never flow
    into earlier batches.
    """
    store = GraphStore(hp.d, seed=cfg.seed)
    rng = epoch_rng(cfg.seed, epoch)
    total, n_terms = 0.0, 0
    start = time.perf_counter()
    for b, batch in enumerate(make_minibatches(events, cfg.batch_size)):
        tape = nm.Tape()
        P = params.tensors(tape)
        if cfg.task == "link_prediction":
            loss = lp_batch(batch, store, P, hp, cfg.q, rng, cfg.literal_negatives)
            count = len(batch)
        else:
            loss, count = nc_batch(batch, store, P, hp, labels or {}, train_nodes or set())
        value = float(loss.data)
        if not math.isfinite(value):
            norms = {k: float(np.linalg.norm(a)) for k, a in params.arrays.items()}
            raise TrainingAbort(f"non-finite loss {value} at batch {b}; max param norm {max(norms.values()):.3g}")
        if count:
            gmap = tape.backward(loss)
            grads = {k: gmap[t.tid] for k, t in P.items()}
            optimizer_step(params, grads, opt_state, cfg.lr)
        total += value
        n_terms += count
        store.detach_all()
    elapsed = time.perf_counter() - start
    mean = total / n_terms if n_terms else 0.0
    logger.info("epoch %d: mean loss %.6f", epoch, mean)
    return EpochMetrics(epoch, mean, len(events) / elapsed if elapsed > 0 else 0.0, store)


def embed(events: Sequence[InteractionEvent], params: ModelParams, hp: HyperParams, seed: int,
          store: GraphStore | None = None) -> GraphStore:
    """Replay a stream without taping and return the resulting store."""
    store = store if store is not None else GraphStore(hp.d, seed=seed)
    P = params.tensors()
    for ev in events:
        process_event(ev, store, P, hp)
    return store
