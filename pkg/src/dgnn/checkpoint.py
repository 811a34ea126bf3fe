"""Versioned binary checkpoints.

Layout: magic ``DGNN\\x01``, a little-endian uint32 header length, a UTF-8 JSON
header, then every array as raw little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .experiment import EpochRecord, TrainingRun
from .training import OptimizerState
from .units import ModelParams

MAGIC = b"DGNN\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    run: TrainingRun
    node_ids: list[str]
    features: np.ndarray  # rows follow node_ids
    class_names: list[str] = field(default_factory=list)

    def feature_map(self) -> dict[int, np.ndarray]:
        return {i: self.features[i] for i in range(len(self.node_ids))}


def _arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    run = ck.run
    out = [(f"params/{k}", a) for k, a in run.params.arrays.items()]
    out += [(f"best/{k}", a) for k, a in run.best_params.arrays.items()]
    out += [(f"adam_m/{k}", a) for k, a in run.opt_state.m.items()]
    out += [(f"adam_v/{k}", a) for k, a in run.opt_state.v.items()]
    out.append(("features", ck.features))
    return out


def save(path, ck: Checkpoint) -> None:
    run = ck.run
    arrays = _arrays(ck)
    header = {
        "format_version": FORMAT_VERSION,
        "config": run.cfg.to_dict(),
        "seeds": {"params": run.cfg.seed, "node_states": run.cfg.seed, "negatives": run.cfg.seed},
        "n_classes": run.n_classes,
        "class_names": ck.class_names,
        "node_ids": ck.node_ids,
        "stream_position": {"epochs_done": run.epochs_done},
        "best": {"epoch": run.best_epoch, "score": run.best_score},
        "history": [asdict(r) for r in run.history],
        "optimizer": {
            "kind": run.opt_state.kind,
            "step": run.opt_state.step,
            "beta1": run.opt_state.beta1,
            "beta2": run.opt_state.beta2,
            "eps": run.opt_state.eps,
        },
        "param_layout": {k: list(a.shape) for k, a in run.params.arrays.items()},
        "param_count": run.params.count(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a DGNN checkpoint")
    (n,) = struct.unpack_from("<I", raw, len(MAGIC))
    pos = len(MAGIC) + 4
    header = json.loads(raw[pos : pos + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    pos += n
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")

    cfg = RunConfig(**header["config"])
    layout = header["param_layout"]
    d, n_classes = cfg.d, header["n_classes"]

    def params(prefix):
        return ModelParams({k: arrays[f"{prefix}/{k}"] for k in layout}, d, n_classes)

    opt = header["optimizer"]
    opt_state = OptimizerState(
        kind=opt["kind"],
        m={k: arrays[f"adam_m/{k}"] for k in layout if f"adam_m/{k}" in arrays},
        v={k: arrays[f"adam_v/{k}"] for k in layout if f"adam_v/{k}" in arrays},
        step=opt["step"],
        beta1=opt["beta1"],
        beta2=opt["beta2"],
        eps=opt["eps"],
    )
    run = TrainingRun(
        cfg=cfg,
        params=params("params"),
        opt_state=opt_state,
        best_params=params("best"),
        n_classes=n_classes,
        epochs_done=header["stream_position"]["epochs_done"],
        best_epoch=header["best"]["epoch"],
        best_score=header["best"]["score"],
        history=[EpochRecord(**r) for r in header["history"]],
    )
    return Checkpoint(run, header["node_ids"], arrays["features"], header["class_names"])
