"""Edge-stream and label files, id mapping, and a synthetic community stream."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph_store import SECONDS_PER_DAY, InteractionEvent, OrderingError

logger = logging.getLogger(__name__)


class InputError(ValueError):
    pass


@dataclass
class IdMap:
    """Dense internal indices for arbitrary string node ids."""

    ids: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    def add(self, name: str) -> int:
        i = self.index.get(name)
        if i is None:
            i = len(self.ids)
            self.index[name] = i
            self.ids.append(name)
        return i

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> str:
        return self.ids[i]


@dataclass
class EdgeStream:
    events: list[InteractionEvent]
    idmap: IdMap
    t0: float = 0.0
    time_scale: float = SECONDS_PER_DAY
    was_sorted: bool = True

    @property
    def duration(self) -> float:
        if not self.events:
            return 0.0
        return self.events[-1].t - self.events[0].t


def _parse_lines(lines: Iterable[str], fmt: str, source: str):
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("%") or line.startswith("#"):
            continue
        parts = line.split("\t") if fmt == "tsv" else line.split()
        if fmt == "tsv" and len(parts) != 3:
            raise InputError(f"{source}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        if fmt == "konect" and len(parts) < 3:
            raise InputError(f"{source}:{lineno}: expected at least 3 fields")
        src, dst = parts[0].strip(), parts[1].strip()
        ts_field = parts[2] if fmt == "tsv" else parts[3] if len(parts) >= 4 else parts[2]
        try:
            ts = float(ts_field)
        except ValueError:
            raise InputError(f"{source}:{lineno}: bad timestamp {ts_field!r}") from None
        if not np.isfinite(ts) or not src or not dst:
            raise InputError(f"{source}:{lineno}: malformed event")
        yield lineno, src, dst, ts


def parse_edge_stream(lines: Iterable[str], sort: bool = False, fmt: str = "tsv",
                      time_scale: float = SECONDS_PER_DAY, source: str = "<stream>") -> EdgeStream:
    """Parse ``src<TAB>dst<TAB>unix_ts`` lines (or KONECT ``src dst weight ts``).

    Times are shifted to start at zero and divided by ``time_scale`` seconds per
    engine unit (days by default).
    """
    if fmt not in ("tsv", "konect"):
        raise InputError(f"unknown stream format {fmt!r}")
    rows = list(_parse_lines(lines, fmt, source))
    in_order = all(rows[i][3] <= rows[i + 1][3] for i in range(len(rows) - 1))
    if not in_order:
        if not sort:
            bad = next(i for i in range(len(rows) - 1) if rows[i][3] > rows[i + 1][3])
            err = OrderingError(rows[bad][3], rows[bad + 1][3])
            raise InputError(f"{source}:{rows[bad + 1][0]}: stream not sorted by time ({err})")
        rows.sort(key=lambda r: r[3])
    idmap = IdMap()
    t0 = rows[0][3] if rows else 0.0
    events = []
    for _, src, dst, ts in rows:
        events.append(InteractionEvent(idmap.add(src), idmap.add(dst), (ts - t0) / time_scale))
    return EdgeStream(events, idmap, t0, time_scale, in_order)


def load_edge_stream(path, sort: bool = False, fmt: str = "tsv", time_scale: float = SECONDS_PER_DAY) -> EdgeStream:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_edge_stream(fh, sort, fmt, time_scale, str(path))


def write_edge_stream(path, rows: Iterable[tuple[str, str, int]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for src, dst, ts in rows:
            fh.write(f"{src}\t{dst}\t{ts}\n")


def load_labels(path, idmap: IdMap) -> tuple[dict[int, int], list[str]]:
    """Read ``node_id<TAB>label`` lines; labels of nodes absent from the stream are dropped."""
    classes: dict[str, int] = {}
    labels: dict[int, int] = {}
    dropped = 0
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected node_id<TAB>label")
            node, label = parts[0].strip(), parts[1].strip()
            cls = classes.setdefault(label, len(classes))
            if node in idmap.index:
                labels[idmap.index[node]] = cls
            else:
                dropped += 1
    if dropped:
        logger.warning("%d labeled nodes never appear in the stream", dropped)
    return labels, list(classes)


def write_labels(path, rows: Iterable[tuple[str, str]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for node, label in rows:
            fh.write(f"{node}\t{label}\n")


# -- synthetic data ------------------------------------------------------------------


def community_stream(n_nodes: int = 300, n_events: int = 3000, n_communities: int = 3, intra: float = 0.9,
                     seed: int = 0, span_days: float = 60.0, repeat: float = 0.5,
                     start: int = 1_500_000_000) -> tuple[list[tuple[str, str, int]], dict[str, int]]:
    """Directed temporal graph with planted communities.

    Each edge stays inside the source's community with probability ``intra``.
    Activity and popularity are heavy-tailed, and with probability ``repeat`` a
    source re-contacts one of its earlier partners in the chosen pool.
    Returns ``(src, dst, unix_ts)`` rows and the community of every node.
    """
    rng = np.random.default_rng(seed)
    community = np.arange(n_nodes) % n_communities
    activity = rng.pareto(1.5, n_nodes) + 1.0
    popularity = rng.pareto(1.5, n_nodes) + 1.0
    members = [np.flatnonzero(community == c) for c in range(n_communities)]
    partners: list[list[int]] = [[] for _ in range(n_nodes)]
    gap = span_days * SECONDS_PER_DAY / n_events
    t = float(start)
    rows = []
    src_p = activity / activity.sum()
    for _ in range(n_events):
        s = int(rng.choice(n_nodes, p=src_p))
        if rng.random() < intra or n_communities == 1:
            c = community[s]
        else:
            c = int(rng.choice([k for k in range(n_communities) if k != community[s]]))
        pool = members[c]
        prior = [p for p in partners[s] if community[p] == c]
        if prior and rng.random() < repeat:
            g = int(prior[rng.integers(len(prior))])
        else:
            w = popularity[pool] * (pool != s)
            g = int(rng.choice(pool, p=w / w.sum()))
        partners[s].append(g)
        t += rng.exponential(gap)
        rows.append((f"n{s}", f"n{g}", int(t)))
    return rows, {f"n{i}": int(community[i]) for i in range(n_nodes)}


def to_events(rows: Sequence[tuple[str, str, int]], time_scale: float = SECONDS_PER_DAY) -> EdgeStream:
    return parse_edge_stream((f"{s}\t{d}\t{t}" for s, d, t in rows), time_scale=time_scale)
