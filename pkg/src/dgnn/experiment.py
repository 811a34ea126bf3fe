"""Train/validate/test orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import RunConfig
from .evaluation import LinkMetrics, NodeSplit, Ranker, TemporalSplit, evaluate_links, f1_scores, node_split
from .graph_store import InteractionEvent
from .training import OptimizerState, embed, train_epoch
from .units import ModelParams

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    events_per_sec: float
    valid_score: float


@dataclass
class TrainingRun:
    cfg: RunConfig
    params: ModelParams
    opt_state: OptimizerState
    best_params: ModelParams
    n_classes: int = 2
    epochs_done: int = 0
    best_epoch: int = -1
    best_score: float = -math.inf
    history: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def start(cls, cfg: RunConfig, n_classes: int = 2) -> "TrainingRun":
        params = ModelParams.init(cfg.d, n_classes, cfg.seed)
        return cls(cfg, params, OptimizerState.for_params(params, cfg.optimizer), params.copy(), n_classes)


def features_after(events: Sequence[InteractionEvent], params: ModelParams, cfg: RunConfig) -> dict:
    return embed(events, params, cfg.hyper(), cfg.seed).features()


def ranker_for(features: Mapping, params: ModelParams, cfg: RunConfig) -> Ranker:
    return Ranker(features, cfg.feature_mode, params.arrays["lp.P_s"], params.arrays["lp.P_g"], cfg.exclude_self)


def link_metrics(train: Sequence[InteractionEvent], target: Sequence[InteractionEvent], params: ModelParams,
                 cfg: RunConfig) -> LinkMetrics:
    """Rank ``target`` edges using features learned from the ``train`` prefix."""
    return evaluate_links(target, ranker_for(features_after(train, params, cfg), params, cfg))


def fit_link_prediction(run: TrainingRun, split: TemporalSplit, epochs: int | None = None,
                        on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainingRun:
    """Continue training for ``epochs`` more epochs, tracking the best validation MRR."""
    cfg = run.cfg
    tc, hp = cfg.train(), cfg.hyper()
    for _ in range(epochs if epochs is not None else cfg.epochs - run.epochs_done):
        m = train_epoch(split.train, run.params, hp, tc, run.opt_state, run.epochs_done)
        score = link_metrics(split.train, split.valid, run.params, cfg).mrr if split.valid else -m.mean_loss
        rec = EpochRecord(run.epochs_done, m.mean_loss, m.events_per_sec, score)
        _record(run, rec)
        if on_epoch:
            on_epoch(rec)
    return run


def _record(run: TrainingRun, rec: EpochRecord) -> None:
    run.history.append(rec)
    if rec.valid_score > run.best_score:
        run.best_score = rec.valid_score
        run.best_epoch = rec.epoch
        run.best_params = run.params.copy()
    run.epochs_done += 1
    logger.info("epoch %d loss %.5f valid %.5f", rec.epoch, rec.mean_loss, rec.valid_score)


def split_labeled_nodes(labels: Mapping, cfg: RunConfig) -> NodeSplit:
    """Node split drawn from a stream independent of training randomness."""
    rng = np.random.default_rng((cfg.seed, 0x5E1))
    return node_split(sorted(labels), rng, cfg.labeled_fraction)


def predict_labels(features: Mapping, params: ModelParams, nodes: Sequence) -> list[int]:
    W = params.arrays["nc.W"]
    return [int(np.argmax(W @ features[v])) for v in nodes]


def classification_metrics(events: Sequence[InteractionEvent], params: ModelParams, cfg: RunConfig,
                           labels: Mapping, nodes: Sequence, n_classes: int) -> dict[str, float]:
    feats = features_after(events, params, cfg)
    nodes = [v for v in nodes if v in feats]
    return f1_scores(predict_labels(feats, params, nodes), [labels[v] for v in nodes], n_classes)


def fit_node_classification(run: TrainingRun, events: Sequence[InteractionEvent], labels: Mapping,
                            split: NodeSplit, epochs: int | None = None,
                            on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainingRun:
    """Semi-supervised training; every node is streamed but only ``split.train`` labels are used."""
    cfg = run.cfg
    tc, hp = cfg.train(), cfg.hyper()
    train_nodes = set(split.train)
    for _ in range(epochs if epochs is not None else cfg.epochs - run.epochs_done):
        m = train_epoch(events, run.params, hp, tc, run.opt_state, run.epochs_done, labels, train_nodes)
        score = classification_metrics(events, run.params, cfg, labels, split.valid, run.n_classes)["micro"]
        rec = EpochRecord(run.epochs_done, m.mean_loss, m.events_per_sec, score)
        _record(run, rec)
        if on_epoch:
            on_epoch(rec)
    return run
