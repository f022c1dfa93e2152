"""Interaction-log ingestion.

Input lines are `timestamp,spreader,author[,hashtags]` with epoch-second
timestamps and a `;`-separated hashtag list; no header, no quoting. The
same file serves both cube shapes: triplet mode yields one record per
line (any hashtag field ignored), quad mode expands a line with m
hashtags into m records and keeps a single hashtag-less record otherwise,
so the time cube and the hashtag cube can be built from one log without
double counting.

Malformed lines never abort a parse; they are collected with their line
numbers in the report.
"""
from __future__ import annotations

import gzip
import hashlib
import unicodedata
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator


class IngestError(ValueError):
    """Unusable input artifact (not a recoverable per-line problem)."""


@dataclass(frozen=True)
class InteractionRecord:
    spreader: str
    author: str
    day: str
    hour: int
    hashtag: str | None = None


@dataclass(frozen=True)
class ParseReport:
    records: list[InteractionRecord]
    errors: list[tuple[int, str]]  # (1-based line number, message)


def bin_time(timestamp: float, zone: float = 0.0) -> tuple[str, int]:
    """Epoch seconds -> (ISO date label, hour 0-23) at a fixed UTC offset in hours."""
    if not -24.0 < zone < 24.0:
        raise IngestError(f"zone offset {zone} out of range")
    tz = timezone(timedelta(hours=zone))
    dt = datetime.fromtimestamp(float(timestamp), tz)
    return dt.date().isoformat(), dt.hour


def normalize_hashtag(tag: str) -> str:
    """Lowercased compatibility decomposition with combining marks removed.

    Idempotent, so ingest output can be re-ingested: Élection -> election.
    """
    decomposed = unicodedata.normalize("NFKD", tag)
    stripped = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    return stripped.lower()


def parse_interactions(stream: Iterable[str], format: str = "triplet",
                       zone: float = 0.0) -> ParseReport:
    """Parse log lines into records; format is "triplet" or "quad"."""
    if format not in ("triplet", "quad"):
        raise IngestError(f"format must be 'triplet' or 'quad', got {format!r}")
    records: list[InteractionRecord] = []
    errors: list[tuple[int, str]] = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split(",", 3)
        if len(parts) < 3:
            errors.append((lineno, "expected timestamp,spreader,author[,hashtags]"))
            continue
        spreader = parts[1].strip()
        author = parts[2].strip()
        try:
            ts = float(parts[0])
        except ValueError:
            errors.append((lineno, f"bad timestamp {parts[0].strip()!r}"))
            continue
        if not spreader or not author:
            errors.append((lineno, "empty spreader or author key"))
            continue
        day, hour = bin_time(ts, zone)
        if format == "triplet":
            records.append(InteractionRecord(spreader, author, day, hour))
            continue
        raw_tags = parts[3] if len(parts) == 4 else ""
        tags = [normalize_hashtag(t.strip()) for t in raw_tags.split(";")]
        tags = [t for t in tags if t]
        if tags:
            for tag in tags:
                records.append(InteractionRecord(spreader, author, day, hour, tag))
        else:
            records.append(InteractionRecord(spreader, author, day, hour))
    return ParseReport(records, errors)


def open_text(path: str | Path) -> Iterator[str]:
    """Line iterator over a text file, transparently gunzipping *.gz."""
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", encoding="utf-8") as fh:
        yield from fh


def parse_file(path: str | Path, format: str = "triplet", zone: float = 0.0) -> ParseReport:
    return parse_interactions(open_text(path), format=format, zone=zone)


def load_communities(source: str | Path | Iterable[str]) -> dict[str, str]:
    """Read `spreader,community` lines into a mapping; strict, no recovery."""
    lines = open_text(source) if isinstance(source, (str, Path)) else source
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise IngestError(f"communities line {lineno}: expected spreader,community")
        mapping[parts[0].strip()] = parts[1].strip()
    return mapping


def anonymize_keys(keys: Iterable[str], salt: str) -> dict[str, str]:
    """Deterministic salted aliasing: key -> user-<rank of salted digest>."""
    ranked = sorted(set(keys),
                    key=lambda k: hashlib.sha256((salt + k).encode("utf-8")).hexdigest())
    return {key: f"user-{i}" for i, key in enumerate(ranked)}
