"""Shared fixtures and small builders used across the suite."""
from __future__ import annotations

import numpy as np
import pytest

from cubelens.cube import DimensionSchema, base_cube_from_columns
from cubelens.ingest import InteractionRecord


def rec(spreader="s1", author="a1", day="d1", hour=0, hashtag=None):
    return InteractionRecord(spreader, author, day, hour, hashtag)


def cube_from_counts(schema: DimensionSchema, cells: dict):
    """Base cube from {coord tuple: count}; coord order follows the schema."""
    cols: dict[str, list] = {d.name: [] for d in schema.dims}
    for coord, n in cells.items():
        for d, v in zip(schema.dims, coord):
            cols[d.name].extend([v] * n)
    return base_cube_from_columns(schema, cols)


def random_time_columns(rng: np.random.Generator, n: int,
                        spreaders=6, authors=5, days=4, hours=24) -> dict:
    return {
        "spreader": [f"s{i}" for i in rng.integers(0, spreaders, n)],
        "author": [f"a{i}" for i in rng.integers(0, authors, n)],
        "day": [f"2016-08-{d + 1:02d}" for d in rng.integers(0, days, n)],
        "hour": rng.integers(0, hours, n).astype(int).tolist(),
    }


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    """The demo fixture dataset written once per test session."""
    from cubelens import synth

    out = tmp_path_factory.mktemp("demo")
    synth.write_scenario(synth.preset("demo", 0), out)
    spec = synth.preset("demo", 0)
    lines = [f"user-{i},community-{i % 4}\n" for i in range(spec.users)]
    (out / "communities.csv").write_text("".join(lines), encoding="utf-8")
    return out
