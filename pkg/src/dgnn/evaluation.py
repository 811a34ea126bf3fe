"""Link-prediction ranking metrics, node-classification F1, and data splits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph_store import InteractionEvent
from .ndmath import DomainError

FIX_SOURCE = "fix-source-rank-targets"
FIX_TARGET = "fix-target-rank-sources"


class EvaluationError(LookupError):
    pass


class DegenerateSplitError(ValueError):
    pass


@dataclass(frozen=True)
class TestPair:
    query: object
    truth: object
    direction: str
    t: float

    __test__ = False  # keep pytest from collecting this


@dataclass(frozen=True)
class RankResult:
    pair: TestPair
    rank: int
    candidates: int


def pairs_from_events(events: Sequence[InteractionEvent]) -> list[TestPair]:
    out = []
    for ev in events:
        out.append(TestPair(ev.src, ev.dst, FIX_SOURCE, ev.t))
        out.append(TestPair(ev.dst, ev.src, FIX_TARGET, ev.t))
    return out


def _unit_rows(M: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, M / safe, 0.0)


class Ranker:
    """Cosine ranking of every registered node against a query node.

    In ``projected`` mode the query is mapped with its own role projection and
    each candidate with the opposite role's projection; ``original`` compares
    raw general features.
    """

    def __init__(self, features: Mapping, mode: str = "projected", P_s=None, P_g=None,
                 exclude_self: bool = False):
        if mode not in ("projected", "original"):
            raise DomainError(f"unknown feature mode {mode!r}")
        self.ids = list(features)
        self.slot = {v: i for i, v in enumerate(self.ids)}
        F = np.array([np.asarray(features[v], dtype=np.float64) for v in self.ids])
        if mode == "projected":
            if P_s is None or P_g is None:
                raise DomainError("projected mode needs both projection matrices")
            self.src_view = _unit_rows(F @ np.asarray(P_s).T)
            self.dst_view = _unit_rows(F @ np.asarray(P_g).T)
        else:
            self.src_view = self.dst_view = _unit_rows(F)
        self.exclude_self = exclude_self

    def scores(self, pair: TestPair) -> np.ndarray:
        q = self.slot[pair.query]
        if pair.direction == FIX_SOURCE:
            return self.dst_view @ self.src_view[q]
        return self.src_view @ self.dst_view[q]

    def rank(self, pair: TestPair) -> RankResult:
        if pair.truth not in self.slot or pair.query not in self.slot:
            raise EvaluationError(f"pair {pair.query!r}->{pair.truth!r} involves an unregistered node")
        s = self.scores(pair)
        truth = self.slot[pair.truth]
        better = s > s[truth]
        n = len(self.ids)
        if self.exclude_self and pair.query != pair.truth:
            better[self.slot[pair.query]] = False
            n -= 1
        return RankResult(pair, 1 + int(better.sum()), n)


def rank_candidates(pair: TestPair, features: Mapping, feature_mode: str = "original", P_s=None, P_g=None,
                    exclude_self: bool = False) -> RankResult:
    return Ranker(features, feature_mode, P_s, P_g, exclude_self).rank(pair)


def mrr(results: Sequence[RankResult]) -> float:
    if not results:
        raise DomainError("MRR of an empty result list")
    return math.fsum(1.0 / r.rank for r in results) / len(results)


def recall_at_k(results: Sequence[RankResult], k: int) -> float:
    if k < 1:
        raise DomainError("k must be >= 1")
    if not results:
        return 0.0
    return sum(1 for r in results if r.rank <= k) / len(results)


@dataclass
class LinkMetrics:
    mrr: float
    recall: dict[int, float]
    pairs: int
    unseen_pairs: int
    results: list[RankResult] = field(default_factory=list, repr=False)

    def rows(self) -> list[tuple[str, float, int | None]]:
        out = [("mrr", self.mrr, None)]
        out += [("recall", v, k) for k, v in sorted(self.recall.items())]
        out.append(("unseen_pairs", float(self.unseen_pairs), None))
        return out


def evaluate_links(events: Sequence[InteractionEvent], ranker: Ranker, ks: Sequence[int] = (20, 50)) -> LinkMetrics:
    results, unseen = [], 0
    for pair in pairs_from_events(events):
        try:
            results.append(ranker.rank(pair))
        except EvaluationError:
            unseen += 1
    value = mrr(results) if results else 0.0
    return LinkMetrics(value, {k: recall_at_k(results, k) for k in ks}, len(results), unseen, results)


def f1_scores(predicted: Sequence[int], truth: Sequence[int], n_classes: int) -> dict[str, float]:
    if len(predicted) != len(truth):
        raise DomainError("predicted and true label lists differ in length")
    for y in (*predicted, *truth):
        if not 0 <= y < n_classes:
            raise DomainError(f"label {y} outside [0, {n_classes})")
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    fn = np.zeros(n_classes)
    for p, y in zip(predicted, truth):
        if p == y:
            tp[y] += 1
        else:
            fp[p] += 1
            fn[y] += 1
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = 2 * TP / (2 * TP + FP + FN) if TP + FP + FN else 0.0
    denom = 2 * tp + fp + fn
    per_class = np.divide(2 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    return {"micro": float(micro), "macro": float(per_class.mean())}


@dataclass
class TemporalSplit:
    train: list
    valid: list
    test: list


def temporal_split(events: Sequence[InteractionEvent]) -> TemporalSplit:
    n = len(events)
    if n < 10:
        warnings.warn(f"temporal split of only {n} events is degenerate", stacklevel=2)
    a = (8 * n) // 10
    b = a + n // 10
    return TemporalSplit(list(events[:a]), list(events[a:b]), list(events[b:]))


@dataclass
class NodeSplit:
    train: list
    unlabeled: list
    valid: list
    test: list


def node_split(nodes: Sequence, rng: np.random.Generator, labeled_fraction: float = 1.0) -> NodeSplit:
    """Hide 20% of labeled nodes (half validation, half test); label a fraction of the rest."""
    n = len(nodes)
    if n < 5:
        raise DegenerateSplitError(f"need at least 5 labeled nodes, got {n}")
    order = [nodes[i] for i in rng.permutation(n)]
    hidden = (2 * n) // 10
    n_valid = n // 10
    visible = order[hidden:]
    n_lab = math.floor(labeled_fraction * len(visible) + 1e-9)
    return NodeSplit(visible[:n_lab], visible[n_lab:], order[:n_valid], order[n_valid:hidden])
