"""Loading real count data into :class:`ObservationSet` form.

Two input formats are supported:

* generic event tables ``source,time,x,y,count`` with a JSON sidecar that
  declares the tensor dimensions;
* co-authorship streams ``source,time,author_a,author_b,weight`` that are
  bucketed in time, filtered by activity and turned into symmetric weighted
  adjacency slices.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .generator import ObservationSet
from .model import InvalidArgumentError

EVENT_COLUMNS = ("source", "time", "x", "y", "count")
COAUTHOR_COLUMNS = ("source", "time", "author_a", "author_b", "weight")


class IngestError(InvalidArgumentError):
    """A malformed input row; the message names the offending row."""


@dataclass(frozen=True)
class EventRecord:
    source: int
    time: int
    x: int
    y: int
    count: float


def sidecar_path(path) -> Path:
    """``events.csv`` -> ``events.meta.json``."""
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _int_field(row: dict, key: str, lineno: int) -> int:
    raw = row.get(key)
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise IngestError(f"row {lineno}: {key}={raw!r} is not a number") from None
    if not value.is_integer():
        raise IngestError(f"row {lineno}: {key}={raw!r} is not an integer")
    return int(value)


def read_event_records(path, dims: dict) -> list[EventRecord]:
    """Parse and range-check every row of an event table.

    Row numbers in error messages count the header as row 1, like a
    spreadsheet would.
    """
    limits = {"source": dims["I"], "time": dims["T"], "x": dims["K"], "y": dims["N"]}
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in EVENT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"missing columns {missing}; expected header {','.join(EVENT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            vals = {k: _int_field(row, k, lineno) for k in limits}
            for key, value in vals.items():
                if not 0 <= value < limits[key]:
                    raise IngestError(f"row {lineno}: {key}={value} outside 0..{limits[key] - 1}")
            try:
                count = float(row["count"])
            except (TypeError, ValueError):
                raise IngestError(f"row {lineno}: count={row['count']!r} is not a number") from None
            if not (count >= 1 and math.isfinite(count)):
                raise IngestError(f"row {lineno}: count must be >= 1, got {row['count']}")
            records.append(EventRecord(vals["source"], vals["time"], vals["x"], vals["y"], count))
    return records


def load_events(path, meta_path=None) -> ObservationSet:
    """Read an event table into an observation set.

    Duplicate ``(source, time, x, y)`` rows are summed; ``n`` for a slice is
    its total count, and slices without any event are flagged missing.
    """
    meta_path = Path(meta_path) if meta_path is not None else sidecar_path(path)
    if not meta_path.exists():
        raise IngestError(f"no sidecar {meta_path} declaring the dimensions")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    dims = meta.get("dims", meta)
    for key in ("T", "I", "K", "N"):
        if key not in dims or int(dims[key]) < 1:
            raise IngestError(f"sidecar must declare a positive {key}")
    dims = {k: int(dims[k]) for k in ("T", "I", "K", "N")}
    counts = np.zeros((dims["T"], dims["I"], dims["K"], dims["N"]))
    for r in read_event_records(path, dims):
        counts[r.time, r.source, r.x, r.y] += r.count
    return ObservationSet(counts=counts, n=counts.sum(axis=(2, 3)))


def export_events(obs: ObservationSet, path, extra_meta: dict | None = None) -> Path:
    """Write ``obs`` as an event table plus sidecar; returns the sidecar path.

    Only the raw counts are written, so the slice totals become ``n`` on
    reading back.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_COLUMNS)
        for t, i, k, m in zip(*np.nonzero(obs.counts)):
            c = obs.counts[t, i, k, m]
            writer.writerow([i, t, k, m, int(c) if float(c).is_integer() else repr(float(c))])
    meta = {"dims": {"T": obs.T, "I": obs.I, "K": obs.K, "N": obs.N}}
    meta.update(extra_meta or {})
    side = sidecar_path(path)
    side.write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return side


@dataclass(frozen=True)
class CoauthorRecord:
    source: str
    time: float
    author_a: str
    author_b: str
    weight: float = 1.0

    def __post_init__(self):
        if self.author_a == self.author_b:
            raise IngestError(f"self-collaboration record for {self.author_a!r}")
        if not self.weight >= 1:
            raise IngestError(f"weight must be >= 1, got {self.weight}")


def read_coauthor_records(path) -> list[CoauthorRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COAUTHOR_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"missing columns {missing}; expected header {','.join(COAUTHOR_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = CoauthorRecord(
                    source=row["source"],
                    time=float(row["time"]),
                    author_a=row["author_a"],
                    author_b=row["author_b"],
                    weight=float(row["weight"] or 1),
                )
            except IngestError as exc:
                raise IngestError(f"row {lineno}: {exc}") from None
            except (TypeError, ValueError):
                raise IngestError(f"row {lineno}: unreadable time or weight") from None
            records.append(rec)
    return records


@dataclass
class CoauthorTensor:
    """Bucketed co-authorship slices and the index maps that label them."""

    obs: ObservationSet
    authors: list
    sources: list
    bucket_starts: list
    symmetric: bool

    @property
    def author_index(self) -> dict:
        return {a: k for k, a in enumerate(self.authors)}

    def save(self, directory) -> None:
        directory = Path(directory)
        self.obs.save(directory)
        index = {
            "authors": self.authors,
            "sources": self.sources,
            "bucket_starts": self.bucket_starts,
            "symmetric": self.symmetric,
        }
        (directory / "index.json").write_text(json.dumps(index, indent=1), encoding="utf-8")


def _bucket(time: float, origin: float, length: float) -> int:
    # left-closed, right-open: [origin + b*len, origin + (b+1)*len)
    return int(math.floor((time - origin) / length))


def build_coauthor_tensor(
    records,
    time_bucket_len: float,
    min_entity_count: float = 0,
    min_source_count: float = 0,
    origin: float | None = None,
    entity_counts: dict | None = None,
    source_counts: dict | None = None,
) -> CoauthorTensor:
    """Symmetric weighted adjacency slices per (source, time bucket).

    Activity filters:

    * authors whose publication count is below ``min_entity_count`` are
      dropped everywhere.  Counts come from ``entity_counts`` when given,
      otherwise from the total weight of the author's records;
    * a source is dropped when any bucket has fewer than
      ``min_source_count`` publications (``source_counts[(source, bucket)]``
      or the total record weight of that slice).

    Each undirected edge of weight ``w`` adds ``w`` at ``(a, b)`` and at
    ``(b, a)``; the diagonal stays zero.  ``n`` is the total of the expanded
    slice, so a normalized slice is a joint PMF over ordered author pairs.
    """
    records = list(records)
    if not time_bucket_len > 0:
        raise InvalidArgumentError("time_bucket_len must be positive")
    if not records:
        raise InvalidArgumentError("no records to build from")
    origin = min(r.time for r in records) if origin is None else origin
    if any(r.time < origin for r in records):
        raise InvalidArgumentError("records before the bucket origin")

    if entity_counts is None:
        entity_counts = defaultdict(float)
        for r in records:
            entity_counts[r.author_a] += r.weight
            entity_counts[r.author_b] += r.weight
    keep_author = {a for a, c in entity_counts.items() if c >= min_entity_count}

    n_buckets = max(_bucket(r.time, origin, time_bucket_len) for r in records) + 1
    if source_counts is None:
        source_counts = defaultdict(float)
        for r in records:
            source_counts[(r.source, _bucket(r.time, origin, time_bucket_len))] += r.weight
    all_sources = sorted({r.source for r in records}, key=str)
    sources = [
        s for s in all_sources
        if all(source_counts.get((s, b), 0.0) >= min_source_count for b in range(n_buckets))
    ]

    kept = [r for r in records if r.source in set(sources) and r.author_a in keep_author and r.author_b in keep_author]
    authors = sorted({r.author_a for r in kept} | {r.author_b for r in kept}, key=str)
    if not authors:
        raise InvalidArgumentError("no source or author survives the activity filters")
    a_idx = {a: k for k, a in enumerate(authors)}
    s_idx = {s: i for i, s in enumerate(sources)}
    D = len(authors)
    counts = np.zeros((n_buckets, len(sources), D, D))
    for r in kept:
        t = _bucket(r.time, origin, time_bucket_len)
        i, a, b = s_idx[r.source], a_idx[r.author_a], a_idx[r.author_b]
        counts[t, i, a, b] += r.weight
        counts[t, i, b, a] += r.weight
    obs = ObservationSet(counts=counts, n=counts.sum(axis=(2, 3)))
    symmetric = bool(np.array_equal(counts, np.swapaxes(counts, -1, -2)))
    starts = [origin + b * time_bucket_len for b in range(n_buckets)]
    return CoauthorTensor(obs=obs, authors=authors, sources=sources, bucket_starts=starts, symmetric=symmetric)
