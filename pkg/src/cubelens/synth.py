"""Synthetic interaction logs with planted anomalies.

Generation is a counting process per (day, hour) cell: a Poisson draw
around baseline x diurnal-profile intensity, attributed to random user
pairs. Plants are injected additively on top:

* hour-spike      -- extra Poisson volume so the cell mean is factor x
                     its baseline mean,
* activist-group  -- a fixed volume of retweets of one author spread
                     round-robin over a spreader set and cell list,
* single-activist -- the same with a single spreader,
* hot-hashtag     -- a fixed volume of tagged retweets by random pairs.

Everything is deterministic under the seed, and the manifest records each
plant with its realized volume, so recovery tests have exact ground
truth. Group/single/hot volumes are exact by construction; only the
hour-spike extra is itself a Poisson draw (keeping the spiked cell a true
Poisson count at factor x the baseline mean).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .ingest import InteractionRecord

FLAT_PROFILE = (1.0,) * 24

# Night 0.5 / shoulder 0.9 / working-hours 1.35 -- strong enough that a
# uniform model misclassifies nights, mild enough that per-hour models
# keep usable intensity there.
DIURNAL_PROFILE = tuple(
    0.5 if h in (0, 1, 2, 3, 4, 5, 22, 23) else
    1.35 if 9 <= h <= 19 else 0.9
    for h in range(24)
)


class SynthError(ValueError):
    """Invalid scenario specification."""


Cell = tuple[int, int]  # (1-based day index, hour 0-23)


@dataclass(frozen=True)
class HourSpike:
    day: int
    hour: int
    factor: float


@dataclass(frozen=True)
class ActivistGroup:
    author: str
    spreaders: tuple[str, ...]
    event: tuple[Cell, ...]
    volume: int


@dataclass(frozen=True)
class SingleActivist:
    author: str
    spreader: str
    event: tuple[Cell, ...]
    volume: int


@dataclass(frozen=True)
class HotHashtag:
    key: str
    event: tuple[Cell, ...]
    volume: int


@dataclass(frozen=True)
class ScenarioSpec:
    days: int
    users: int
    profile: tuple[float, ...] = FLAT_PROFILE
    baseline: float = 50.0
    plants: tuple = ()
    seed: int = 0
    start: date = date(2016, 8, 1)
    background_hashtags: tuple[str, ...] = ()
    hashtag_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.days < 1:
            raise SynthError("days must be >= 1")
        if self.users < 2:
            raise SynthError("users must be >= 2 (a spreader never retweets itself)")
        if len(self.profile) != 24 or any(w < 0 for w in self.profile) or not any(self.profile):
            raise SynthError("profile must be 24 non-negative weights, not all zero")
        if self.baseline < 0:
            raise SynthError("baseline must be >= 0")
        if not 0.0 <= self.hashtag_rate <= 1.0:
            raise SynthError("hashtag_rate must be in [0, 1]")
        if self.hashtag_rate > 0 and not self.background_hashtags:
            raise SynthError("hashtag_rate needs a background_hashtags pool")
        for plant in self.plants:
            if isinstance(plant, HourSpike):
                if plant.factor <= 1:
                    raise SynthError(f"spike factor must be > 1, got {plant.factor}")
                self._check_cell((plant.day, plant.hour))
            elif isinstance(plant, (ActivistGroup, SingleActivist, HotHashtag)):
                if plant.volume < 0:
                    raise SynthError("plant volume must be >= 0")
                if not plant.event:
                    raise SynthError("plant event must list at least one cell")
                for cell in plant.event:
                    self._check_cell(cell)
                if isinstance(plant, ActivistGroup) and not plant.spreaders:
                    raise SynthError("activist group needs at least one spreader")
            else:
                raise SynthError(f"unknown plant type {type(plant).__name__}")

    def _check_cell(self, cell: Cell) -> None:
        day, hour = cell
        if not 1 <= day <= self.days:
            raise SynthError(f"plant day {day} outside 1..{self.days}")
        if not 0 <= hour <= 23:
            raise SynthError(f"plant hour {hour} outside 0..23")

    def day_label(self, day: int) -> str:
        return (self.start + timedelta(days=day - 1)).isoformat()


def _spread_volume(volume: int, n_slots: int) -> list[int]:
    """Exact round-robin split of volume over n_slots."""
    per, extra = divmod(volume, n_slots)
    return [per + (1 if i < extra else 0) for i in range(n_slots)]


def generate(spec: ScenarioSpec) -> tuple[list[InteractionRecord], dict]:
    """Materialize a scenario; returns (records, ground-truth manifest)."""
    rng = np.random.default_rng(spec.seed)
    users = [f"user-{i}" for i in range(spec.users)]
    pool = np.array(spec.background_hashtags, dtype=object) if spec.background_hashtags else None

    spikes: dict[Cell, list[tuple[int, HourSpike]]] = {}
    targeted: dict[Cell, list[tuple]] = {}  # (spreader, author, hashtag, count)
    plant_entries: list[dict] = []
    spike_realized: dict[int, int] = {}

    for idx, plant in enumerate(spec.plants):
        if isinstance(plant, HourSpike):
            spikes.setdefault((plant.day, plant.hour), []).append((idx, plant))
            spike_realized[idx] = 0
            plant_entries.append({
                "kind": "hour-spike",
                "day": spec.day_label(plant.day), "hour": plant.hour,
                "factor": plant.factor, "realized_extra": 0,
            })
        else:
            cells = list(plant.event)
            shares = _spread_volume(plant.volume, len(cells))
            if isinstance(plant, ActivistGroup):
                # Cursor persists across cells so per-spreader totals stay
                # balanced even when a cell share < len(spreaders).
                cursor = 0
                nsp = len(plant.spreaders)
                for cell, share in zip(cells, shares):
                    counts = [0] * nsp
                    for _ in range(share):
                        counts[cursor % nsp] += 1
                        cursor += 1
                    for s, n in zip(plant.spreaders, counts):
                        if n:
                            targeted.setdefault(cell, []).append((s, plant.author, None, n))
                plant_entries.append({
                    "kind": "activist-group", "author": plant.author,
                    "spreaders": list(plant.spreaders),
                    "cells": [[spec.day_label(d), h] for d, h in cells],
                    "volume": plant.volume,
                })
            elif isinstance(plant, SingleActivist):
                for cell, share in zip(cells, shares):
                    if share:
                        targeted.setdefault(cell, []).append(
                            (plant.spreader, plant.author, None, share))
                plant_entries.append({
                    "kind": "single-activist", "author": plant.author,
                    "spreader": plant.spreader,
                    "cells": [[spec.day_label(d), h] for d, h in cells],
                    "volume": plant.volume,
                })
            else:
                for cell, share in zip(cells, shares):
                    if share:
                        targeted.setdefault(cell, []).append((None, None, plant.key, share))
                plant_entries.append({
                    "kind": "hot-hashtag", "key": plant.key,
                    "cells": [[spec.day_label(d), h] for d, h in cells],
                    "volume": plant.volume,
                })

    records: list[InteractionRecord] = []

    def random_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
        s = rng.integers(0, spec.users, n)
        a = (s + rng.integers(1, spec.users, n)) % spec.users
        return s, a

    for day in range(1, spec.days + 1):
        label = spec.day_label(day)
        for hour in range(24):
            lam = spec.baseline * spec.profile[hour]
            n_base = int(rng.poisson(lam)) if lam > 0 else 0
            n_extra = 0
            for idx, plant in spikes.get((day, hour), ()):
                extra = int(rng.poisson((plant.factor - 1.0) * lam)) if lam > 0 else 0
                n_extra += extra
                spike_realized[idx] += extra
            n = n_base + n_extra
            if n:
                s_ids, a_ids = random_pairs(n)
                if pool is not None and spec.hashtag_rate > 0:
                    tagged = rng.random(n) < spec.hashtag_rate
                    tags = rng.integers(0, len(pool), n)
                else:
                    tagged = np.zeros(n, dtype=bool)
                    tags = None
                for i in range(n):
                    tag = str(pool[tags[i]]) if tagged[i] else None
                    records.append(InteractionRecord(
                        users[s_ids[i]], users[a_ids[i]], label, hour, tag))
            for spreader, author, hashtag, count in targeted.get((day, hour), ()):
                if spreader is None:
                    s_ids, a_ids = random_pairs(count)
                    for i in range(count):
                        records.append(InteractionRecord(
                            users[s_ids[i]], users[a_ids[i]], label, hour, hashtag))
                else:
                    for _ in range(count):
                        records.append(InteractionRecord(spreader, author, label, hour, hashtag))

    for i, plant in enumerate(spec.plants):
        if isinstance(plant, HourSpike):
            plant_entries[i]["realized_extra"] = spike_realized[i]

    manifest = {
        "days": spec.days,
        "users": spec.users,
        "baseline": spec.baseline,
        "profile": list(spec.profile),
        "seed": spec.seed,
        "start": spec.start.isoformat(),
        "plants": plant_entries,
        "records": len(records),
    }
    return records, manifest


_EPOCH = date(1970, 1, 1)


def write_scenario(spec: ScenarioSpec, out_dir: str | Path) -> dict:
    """Write interactions.csv + manifest.json; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, manifest = generate(spec)
    rng = np.random.default_rng(spec.seed + 1)  # second-offsets only, binning-invariant
    offsets = rng.integers(0, 3600, len(records))
    lines = []
    for rec, off in zip(records, offsets):
        day_seconds = (date.fromisoformat(rec.day) - _EPOCH).days * 86400
        ts = day_seconds + rec.hour * 3600 + int(off)
        tag = f",{rec.hashtag}" if rec.hashtag else ""
        lines.append(f"{ts},{rec.spreader},{rec.author}{tag}\n")
    (out / "interactions.csv").write_text("".join(lines), encoding="utf-8")
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# -- canned scenarios -------------------------------------------------------

def _history(author: str, spreaders: tuple[str, ...], days: range, hour: int,
             volume: int) -> ActivistGroup:
    """Background volume for an author at one hour-of-day across many days,
    so event-hour comparisons have same-time-other-days support."""
    return ActivistGroup(author, spreaders, tuple((d, hour) for d in days), volume)


def preset(name: str, seed: int = 0) -> ScenarioSpec:
    """Named scenarios used by tests, the CLI and the demo service."""
    crowd = tuple(f"user-{i}" for i in range(100, 400))
    if name == "planted-hours":
        day_spikes = [(3, 13), (5, 10), (8, 15), (11, 18), (14, 11), (17, 16), (20, 12)]
        night_spikes = [(23, 2), (26, 23), (29, 4)]
        return ScenarioSpec(
            days=31, users=400, profile=DIURNAL_PROFILE, baseline=200.0,
            plants=tuple(HourSpike(d, h, 5.0) for d, h in day_spikes + night_spikes),
            seed=seed,
        )
    if name == "single-activist":
        return ScenarioSpec(
            days=31, users=400, profile=FLAT_PROFILE, baseline=30.0,
            plants=(
                _history("user-7", tuple(f"user-{i}" for i in range(100, 130)),
                         range(1, 16), 20, 300),
                SingleActivist("user-7", "user-3", ((16, 20),), 150),
            ),
            seed=seed,
        )
    if name == "activist-group":
        group = tuple(f"user-{i}" for i in range(20, 35))
        return ScenarioSpec(
            days=31, users=400, profile=FLAT_PROFILE, baseline=30.0,
            plants=(
                _history("user-7", crowd, range(1, 16), 18, 1500),
                ActivistGroup("user-7", group, ((16, 18),), 210),
                ActivistGroup("user-7", crowd, ((16, 18),), 390),
            ),
            seed=seed,
        )
    if name == "uniform-burst":
        return ScenarioSpec(
            days=31, users=400, profile=FLAT_PROFILE, baseline=30.0,
            plants=(
                _history("user-7", crowd, range(1, 16), 18, 1500),
                ActivistGroup("user-7", crowd, ((16, 18),), 600),
            ),
            seed=seed,
        )
    if name == "demo":
        tags = tuple(f"tag-{i:02d}" for i in range(20))
        demo_crowd = tuple(f"user-{i}" for i in range(50, 75))
        return ScenarioSpec(
            days=31, users=200, profile=DIURNAL_PROFILE, baseline=120.0,
            plants=(
                HourSpike(24, 20, 5.0), HourSpike(24, 21, 5.0), HourSpike(24, 22, 5.0),
                HourSpike(25, 19, 5.0),
                HourSpike(28, 14, 5.0), HourSpike(28, 15, 5.0),
                _history("user-7", demo_crowd, range(1, 24), 19, 250),
                SingleActivist("user-7", "user-3", ((25, 19),), 150),
                HotHashtag("viral", ((28, 14), (28, 15)), 300),
            ),
            seed=seed,
            background_hashtags=tags,
            hashtag_rate=0.25,
        )
    raise SynthError(f"unknown preset {name!r}; see PRESETS")


PRESETS = ("planted-hours", "single-activist", "activist-group", "uniform-burst", "demo")
