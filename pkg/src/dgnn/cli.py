"""Command-line driver: ``dgnn {validate,train,eval,ablate,sweep-tau,export}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config
from .data import EdgeStream, InputError, load_edge_stream, load_labels
from .evaluation import DegenerateSplitError, temporal_split
from .experiment import (
    TrainingRun,
    classification_metrics,
    features_after,
    fit_link_prediction,
    fit_node_classification,
    link_metrics,
    split_labeled_nodes,
)
from .graph_store import OrderingError
from .ndmath import DimensionError, DomainError, NumericError
from .training import SamplingError

logger = logging.getLogger("dgnn")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
DEFAULT_TAUS = (1.0, 7.0) + tuple(float(t) for t in range(10, 101, 10))
VARIANT_FLAGS = {"prop": "propagation", "ti": "time_intervals", "att": "attention"}


class MappingError(ValueError):
    """Checkpoint node mapping does not match the data file."""


# -- argument plumbing ------------------------------------------------------------


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="edge stream (src<TAB>dst<TAB>unix_ts)")
    p.add_argument("--format", choices=("tsv", "konect"), default="tsv")
    p.add_argument("--sort", action="store_true", help="sort an unsorted stream instead of failing")
    p.add_argument("--labels", help="node_id<TAB>label file (node classification)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    g = p.add_argument_group("overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--q", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--optimizer", choices=("adam", "sgd"))
    g.add_argument("--task", choices=("link_prediction", "node_classification"))
    g.add_argument("--labeled-fraction", type=float)
    g.add_argument("--feature-mode", choices=("projected", "original"))
    g.add_argument("--time-scale", type=float, help="seconds per engine time unit")
    g.add_argument("--decay", choices=("reciprocal_log", "reciprocal"))
    for flag, name in (("propagation", "propagation"), ("time-intervals", "time_intervals"),
                       ("attention", "attention"), ("literal-negatives", "literal_negatives"),
                       ("exclude-self", "exclude_self")):
        g.add_argument(f"--{flag}", dest=name, action=argparse.BooleanOptionalAction, default=None)


_OVERRIDES = ("seed", "d", "tau", "q", "lr", "batch_size", "epochs", "optimizer", "task", "labeled_fraction",
              "feature_mode", "time_scale", "decay", "propagation", "time_intervals", "attention",
              "literal_negatives", "exclude_self")


def config_from_args(args) -> RunConfig:
    return load_config(args.config, **{k: getattr(args, k) for k in _OVERRIDES})


def _load_stream(args, cfg: RunConfig) -> EdgeStream:
    return load_edge_stream(args.data, sort=args.sort, fmt=args.format, time_scale=cfg.time_scale)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def variant_name(cfg: RunConfig) -> str:
    off = [v for v, f in VARIANT_FLAGS.items() if not getattr(cfg, f)]
    return "DGNN" + "".join(f"-{v}" for v in off)


# -- shared workflows -------------------------------------------------------------


def _labels_for(args, stream: EdgeStream):
    if not args.labels:
        raise InputError("node classification needs --labels")
    labels, classes = load_labels(args.labels, stream.idmap)
    if len(classes) < 2:
        raise InputError(f"{args.labels}: need at least 2 classes, found {len(classes)}")
    return labels, classes


def train_run(cfg: RunConfig, stream: EdgeStream, labels=None, n_classes: int = 2,
              run: TrainingRun | None = None, on_epoch=None) -> TrainingRun:
    run = run or TrainingRun.start(cfg, n_classes)
    if cfg.task == "link_prediction":
        split = temporal_split(stream.events)
        if not split.train:
            raise DegenerateSplitError("training split is empty")
        return fit_link_prediction(run, split, on_epoch=on_epoch)
    return fit_node_classification(run, stream.events, labels, split_labeled_nodes(labels, cfg), on_epoch=on_epoch)


def _training_prefix(cfg: RunConfig, stream: EdgeStream):
    return temporal_split(stream.events).train if cfg.task == "link_prediction" else stream.events


def make_checkpoint(run: TrainingRun, stream: EdgeStream, class_names=()) -> ckpt.Checkpoint:
    feats = features_after(_training_prefix(run.cfg, stream), run.best_params, run.cfg)
    order = sorted(feats)  # internal ids are assigned in stream order
    F = np.array([feats[v] for v in order]) if order else np.zeros((0, run.cfg.d))
    return ckpt.Checkpoint(run, [stream.idmap[v] for v in order], F, list(class_names))


def check_mapping(ck: ckpt.Checkpoint, stream: EdgeStream) -> None:
    ids = stream.idmap.ids
    if ids[: len(ck.node_ids)] != ck.node_ids:
        bad = next((i for i, (a, b) in enumerate(zip(ids, ck.node_ids)) if a != b), min(len(ids), len(ck.node_ids)))
        raise MappingError(f"checkpoint node mapping is incompatible with the data (first mismatch at index {bad})")


def eval_link(cfg: RunConfig, stream: EdgeStream, params, split_name: str, ks=(20, 50)):
    split = temporal_split(stream.events)
    target = {"train": split.train, "valid": split.valid, "test": split.test}[split_name]
    m = link_metrics(split.train, target, params, cfg)
    if ks != (20, 50):
        from .evaluation import recall_at_k

        m.recall = {k: recall_at_k(m.results, k) for k in ks}
    return m


def metric_rows(cfg: RunConfig, metrics) -> list[dict]:
    common = {"seed": cfg.seed, "variant": variant_name(cfg), "tau": cfg.tau}
    if isinstance(metrics, dict):
        return [{"metric": f"f1_{k}", "value": v, "k": None, **common} for k, v in metrics.items()]
    return [{"metric": name, "value": v, "k": k, **common} for name, v, k in metrics.rows()]


def write_csv(path, header: Sequence[str], rows: Sequence[dict]) -> None:
    out = sys.stdout if path in (None, "-") else open(path, "w", newline="", encoding="utf-8")
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])
    finally:
        if out is not sys.stdout:
            out.close()


# -- commands ---------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    stream = _load_stream(args, cfg)
    if not stream.events:
        logger.warning("%s contains no events", args.data)
    print(f"events\t{len(stream.events)}")
    print(f"nodes\t{len(stream.idmap)}")
    print(f"duration_days\t{_fmt(stream.duration * cfg.time_scale / 86400.0)}")
    print(f"sorted\t{'yes' if stream.was_sorted else 'no'}")
    return EXIT_OK


def cmd_train(args) -> int:
    stream = _load_stream(args, config_from_args(args))
    labels, classes = None, []
    run = None
    if args.resume:
        ck = ckpt.load(args.resume)
        check_mapping(ck, stream)
        run = ck.run
        if args.epochs is not None:
            run.cfg = run.cfg.replace(epochs=args.epochs)
        classes = ck.class_names
    cfg = run.cfg if run else config_from_args(args)
    if cfg.task == "node_classification":
        labels, classes = _labels_for(args, stream)
    rows = [{"epoch": r.epoch, "mean_loss": r.mean_loss, "events_per_sec": r.events_per_sec}
            for r in (run.history if run else [])]

    def on_epoch(rec):
        rows.append({"epoch": rec.epoch, "mean_loss": rec.mean_loss, "events_per_sec": rec.events_per_sec})
        logger.info("epoch %d  loss %.6f  valid %.6f", rec.epoch, rec.mean_loss, rec.valid_score)

    run = train_run(cfg, stream, labels, max(len(classes), 2), run, on_epoch)
    if args.no_timing:
        for r in rows:
            r["events_per_sec"] = 0.0
    write_csv(args.metrics, ("epoch", "mean_loss", "events_per_sec"), rows)
    ckpt.save(args.out, make_checkpoint(run, stream, classes))
    logger.info("best epoch %d (validation %.6f); checkpoint written to %s", run.best_epoch, run.best_score, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    cfg = ck.run.cfg
    stream = load_edge_stream(args.data, sort=args.sort, fmt=args.format, time_scale=cfg.time_scale)
    check_mapping(ck, stream)
    params = ck.run.best_params if args.params == "best" else ck.run.params
    ks = tuple(int(k) for k in args.ks.split(","))
    if cfg.task == "link_prediction":
        metrics = eval_link(cfg, stream, params, args.split, ks)
        summary = {"task": cfg.task, "split": args.split, "mrr": metrics.mrr,
                   "recall": {str(k): v for k, v in metrics.recall.items()},
                   "pairs": metrics.pairs, "unseen_pairs": metrics.unseen_pairs}
        if args.ranks:
            with open(args.ranks, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("query", "truth", "direction", "t", "rank", "candidates"))
                for r in metrics.results:
                    p = r.pair
                    w.writerow((stream.idmap[p.query], stream.idmap[p.truth], p.direction, repr(p.t),
                                r.rank, r.candidates))
    else:
        labels, _ = load_labels(args.labels, stream.idmap) if args.labels else (None, None)
        if labels is None:
            raise InputError("node classification needs --labels")
        split = split_labeled_nodes(labels, cfg)
        nodes = {"train": split.train, "valid": split.valid, "test": split.test}[args.split]
        metrics = classification_metrics(stream.events, params, cfg, labels, nodes, ck.run.n_classes)
        summary = {"task": cfg.task, "split": args.split, **{f"f1_{k}": v for k, v in metrics.items()}}
    write_csv(args.out, ("metric", "value", "k", "seed", "variant", "tau"), metric_rows(cfg, metrics))
    if args.summary:
        Path(args.summary).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _train_and_test(cfg: RunConfig, stream: EdgeStream, labels=None, n_classes: int = 2):
    run = train_run(cfg, stream, labels, n_classes)
    if cfg.task == "link_prediction":
        return eval_link(cfg, stream, run.best_params, "test")
    split = split_labeled_nodes(labels, cfg)
    return classification_metrics(stream.events, run.best_params, cfg, labels, split.test, n_classes)


def _table_row(name: str, metrics) -> dict:
    if isinstance(metrics, dict):
        return {"variant": name, "f1_micro": metrics["micro"], "f1_macro": metrics["macro"]}
    row = {"variant": name, "mrr": metrics.mrr}
    row.update({f"recall@{k}": v for k, v in sorted(metrics.recall.items())})
    return row


def cmd_ablate(args) -> int:
    cfg = config_from_args(args)
    stream = _load_stream(args, cfg)
    labels, classes = (None, [])
    if cfg.task == "node_classification":
        labels, classes = _labels_for(args, stream)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = set(variants) - set(VARIANT_FLAGS)
    if unknown:
        raise InputError(f"unknown variants {sorted(unknown)}; choose from {sorted(VARIANT_FLAGS)}")
    rows = []
    for v in [None, *variants]:
        vc = cfg if v is None else cfg.replace(**{VARIANT_FLAGS[v]: False})
        name = "DGNN" if v is None else f"DGNN-{v}"
        rows.append(_table_row(name, _train_and_test(vc, stream, labels, max(len(classes), 2))))
    header = list(rows[0])
    write_csv(args.out, header, rows)
    return EXIT_OK


def _sweep_point(cfg: RunConfig, stream: EdgeStream) -> dict:
    m = _train_and_test(cfg, stream)
    return {"tau": cfg.tau, "mrr": m.mrr, **{f"recall@{k}": v for k, v in sorted(m.recall.items())}}


def cmd_sweep_tau(args) -> int:
    cfg = config_from_args(args)
    if cfg.task != "link_prediction":
        raise InputError("sweep-tau reports MRR and needs task = link_prediction")
    stream = _load_stream(args, cfg)
    taus = sorted(float(t) for t in args.taus.split(",")) if args.taus else list(DEFAULT_TAUS)
    cfgs = [cfg.replace(tau=t) for t in taus]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_point, cfgs, [stream] * len(cfgs)))
    else:
        rows = [_sweep_point(c, stream) for c in cfgs]
    rows.sort(key=lambda r: r["tau"])
    write_csv(args.out, list(rows[0]), rows)
    return EXIT_OK


def write_embeddings(path, node_ids: Sequence[str], F: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, row in zip(node_ids, F):
            fh.write(name + "\t" + " ".join(repr(float(x)) for x in row) + "\n")


def load_embeddings(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            name, _, values = line.rstrip("\n").partition("\t")
            try:
                out[name] = np.array([float(x) for x in values.split()])
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad embedding values") from None
    return out


def cmd_export(args) -> int:
    ck = ckpt.load(args.checkpoint)
    write_embeddings(args.out, ck.node_ids, ck.features)
    logger.info("wrote %d embeddings of width %d to %s", len(ck.node_ids), ck.features.shape[1], args.out)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgnn", description="Streaming dynamic graph neural network experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="report stream statistics")
    p.add_argument("data")
    p.add_argument("--format", choices=("tsv", "konect"), default="tsv")
    p.add_argument("--sort", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train and write a checkpoint plus per-epoch metrics")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", default="-", help="metrics CSV path (default stdout)")
    p.add_argument("--resume", help="continue from a checkpoint up to --epochs total epochs")
    p.add_argument("--no-timing", action="store_true", help="write 0 for events_per_sec so reruns are byte-identical")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--params", choices=("best", "latest"), default="best")
    p.add_argument("--ks", default="20,50")
    p.add_argument("--out", default="-", help="metrics CSV path (default stdout)")
    p.add_argument("--summary", help="JSON summary path")
    p.add_argument("--ranks", help="per-pair rank CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare the full model with variants")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--variants", default="prop,ti,att")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-tau", help="MRR as a function of the filter threshold")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--taus", help="comma-separated thresholds in days (default 1,7,10,...,100)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("export", help="write general features as text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, OrderingError, MappingError, ckpt.CheckpointError,
            DegenerateSplitError, SamplingError, DomainError, DimensionError, OSError) as exc:
        print(f"dgnn: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"dgnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
