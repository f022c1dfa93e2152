"""Sparse multidimensional count cubes with replayable derivations.

A base cuboid counts interactions per coordinate tuple over a fixed
dimension schema. Derived cuboids come from pure operations:

1. aggregate      -- drop dimensions, summing counts,
2. aggregate_partition -- coarsen one dimension into labeled classes,
3. filter         -- restrict dimensions to value subsets (sub-cube),
4. select_cells   -- restrict two dimensions jointly to a cell set
                     (needed for event scopes that cross midnight).

Every derived cube carries the operation trace, so any cuboid can be
rebuilt from its base (`expand`) and two cuboids remain distinguishable
even when their cells coincide: hours aggregated into a single class and
hours merely filtered are different derivations.

Counts are int64 end to end; no floating point enters this layer, so
grand totals are conserved exactly. Dimension values are interned to
dense integer ids (label tables kept per cube for reporting), and cells
are stored as a lexicographically sorted id matrix plus a count vector.
"""
from __future__ import annotations

import json
import uuid
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

HOUR_DOMAIN = tuple(range(24))

_KINDS = ("categorical", "day", "hour")


class CubeError(ValueError):
    """Schema violation, unknown dimension, bad partition or bad record."""


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str = "categorical"

    def __post_init__(self) -> None:
        if not self.name:
            raise CubeError("dimension name must be non-empty")
        if self.kind not in _KINDS:
            raise CubeError(f"unknown dimension kind {self.kind!r}, expected one of {_KINDS}")


@dataclass(frozen=True)
class DimensionSchema:
    dims: tuple[Dimension, ...]

    def __post_init__(self) -> None:
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise CubeError(f"duplicate dimension names: {names}")
        for kind in ("day", "hour"):
            if sum(1 for d in self.dims if d.kind == kind) > 1:
                raise CubeError(f"at most one {kind!r} dimension allowed")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    def index(self, name: str) -> int:
        for i, d in enumerate(self.dims):
            if d.name == name:
                return i
        raise CubeError(f"unknown dimension {name!r}, cube has {self.names}")

    def kind(self, name: str) -> str:
        return self.dims[self.index(name)].kind


@dataclass(frozen=True)
class Partition:
    """Coarsening of one dimension: maps each observed value to a class label."""

    dim: str
    assignment: Mapping

    @classmethod
    def from_classes(cls, dim: str, classes: Mapping) -> "Partition":
        """Build from {class label: iterable of member values}."""
        assignment = {}
        for label, members in classes.items():
            for value in members:
                if value in assignment:
                    raise CubeError(f"value {value!r} assigned to two classes")
                assignment[value] = label
        return cls(dim, assignment)


@dataclass(frozen=True)
class Selector:
    """Per-dimension value restriction; dimensions not listed keep everything."""

    keep: Mapping

    def __post_init__(self) -> None:
        keep = {d: frozenset(vs) for d, vs in dict(self.keep).items()}
        for d, vs in keep.items():
            if not vs:
                raise CubeError(f"empty value set for dimension {d!r}")
        object.__setattr__(self, "keep", keep)


def _group(keys: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum counts over identical rows; result rows in lexicographic order."""
    n, width = keys.shape
    if n == 0:
        return keys.reshape(0, width).astype(np.int64), counts.reshape(0).astype(np.int64)
    if width == 0:
        return np.zeros((1, 0), dtype=np.int64), np.array([counts.sum()], dtype=np.int64)
    order = np.lexsort(keys.T[::-1])
    k = keys[order]
    c = counts[order]
    starts = np.flatnonzero(np.r_[True, np.any(k[1:] != k[:-1], axis=1)])
    return k[starts], np.add.reduceat(c, starts)


class Cube:
    """Immutable sparse count cube. Construct via build_base_cube or the ops."""

    __slots__ = ("schema", "domains", "_keys", "_counts", "provenance", "base_id",
                 "_label_maps", "_cell_map")

    def __init__(self, schema: DimensionSchema, domains: tuple[tuple, ...],
                 keys: np.ndarray, counts: np.ndarray,
                 provenance: tuple, base_id: str) -> None:
        self.schema = schema
        self.domains = domains
        self._keys = keys
        self._counts = counts
        self.provenance = provenance
        self.base_id = base_id
        self._label_maps = None
        self._cell_map = None

    # -- introspection ----------------------------------------------------

    @property
    def ndim(self) -> int:
        return len(self.schema.dims)

    @property
    def support_size(self) -> int:
        return int(self._keys.shape[0])

    @property
    def grand_total(self) -> int:
        return int(self._counts.sum()) if self._counts.size else 0

    def domain(self, name: str) -> tuple:
        return self.domains[self.schema.index(name)]

    def _maps(self) -> list:
        if self._label_maps is None:
            self._label_maps = [{v: i for i, v in enumerate(dom)} for dom in self.domains]
        return self._label_maps

    def cell_value(self, coord: Sequence) -> int:
        """Count at a label coordinate; absent cells read as 0."""
        if len(coord) != self.ndim:
            raise CubeError(f"coordinate arity {len(coord)} != {self.ndim}")
        ids = []
        for label, m in zip(coord, self._maps()):
            i = m.get(label)
            if i is None:
                return 0
            ids.append(i)
        if self._cell_map is None:
            self._cell_map = {tuple(row): int(c)
                              for row, c in zip(self._keys.tolist(), self._counts.tolist())}
        return self._cell_map.get(tuple(ids), 0)

    def iter_cells(self) -> Iterator[tuple[tuple, int]]:
        """Yield (coord labels, count) in deterministic (sorted id) order."""
        if self.ndim == 0:
            for c in self._counts.tolist():
                yield (), int(c)
            return
        cols = [[self.domains[i][j] for j in self._keys[:, i].tolist()]
                for i in range(self.ndim)]
        for row in zip(*cols, self._counts.tolist()):
            yield row[:-1], int(row[-1])

    def coords(self) -> list[tuple]:
        return [coord for coord, _ in self.iter_cells()]

    def cells_dict(self) -> dict:
        return {coord: count for coord, count in self.iter_cells()}

    # -- operations --------------------------------------------------------

    def _derive(self, schema, domains, keys, counts, op) -> "Cube":
        return Cube(schema, domains, keys, counts, self.provenance + (op,), self.base_id)

    def aggregate(self, drop_dims: Iterable[str]) -> "Cube":
        """Sum out the named dimensions. Dropping all yields the apex cuboid."""
        drop = frozenset(drop_dims)
        for name in drop:
            self.schema.index(name)
        keep = [i for i, d in enumerate(self.schema.dims) if d.name not in drop]
        schema = DimensionSchema(tuple(self.schema.dims[i] for i in keep))
        keys, counts = _group(self._keys[:, keep], self._counts)
        op = ("aggregate", tuple(sorted(drop)))
        return self._derive(schema, tuple(self.domains[i] for i in keep), keys, counts, op)

    def aggregate_partition(self, partition: Partition) -> "Cube":
        """Replace one dimension's values by class labels, summing within classes.

        The assignment must cover every value observed in this cube; values
        never seen need no class.
        """
        i = self.schema.index(partition.dim)
        domain = self.domains[i]
        observed_ids = np.unique(self._keys[:, i]) if self._keys.size else np.array([], dtype=np.int64)
        pairs = []
        for j in observed_ids.tolist():
            value = domain[j]
            if value not in partition.assignment:
                raise CubeError(f"partition of {partition.dim!r} misses observed value {value!r}")
            pairs.append((value, partition.assignment[value]))
        class_labels = tuple(sorted({cls for _, cls in pairs}))
        class_index = {cls: k for k, cls in enumerate(class_labels)}
        lut = np.full(len(domain), -1, dtype=np.int64)
        for j, (value, cls) in zip(observed_ids.tolist(), pairs):
            lut[j] = class_index[cls]
        keys = self._keys.copy()
        if keys.size:
            keys[:, i] = lut[keys[:, i]]
        keys, counts = _group(keys, self._counts)
        dims = list(self.schema.dims)
        dims[i] = Dimension(partition.dim, "categorical")
        domains = list(self.domains)
        domains[i] = class_labels
        op = ("partition", partition.dim, tuple(sorted(pairs)))
        return self._derive(DimensionSchema(tuple(dims)), tuple(domains), keys, counts, op)

    def filter(self, selector: Selector) -> "Cube":
        """Restrict to a sub-cube; constrained dimensions narrow their domain."""
        n = self._keys.shape[0]
        mask = np.ones(n, dtype=bool)
        domains = list(self.domains)
        keys = self._keys.copy()
        payload = []
        for dim in sorted(selector.keep):
            i = self.schema.index(dim)
            wanted = selector.keep[dim]
            kept_labels = tuple(v for v in self.domains[i] if v in wanted)
            m = self._maps()[i]
            kept_ids = np.array([m[v] for v in kept_labels], dtype=np.int64)
            mask &= np.isin(self._keys[:, i], kept_ids)
            lut = np.full(len(self.domains[i]), -1, dtype=np.int64)
            lut[kept_ids] = np.arange(len(kept_ids), dtype=np.int64)
            keys[:, i] = lut[self._keys[:, i]]
            domains[i] = kept_labels
            payload.append((dim, kept_labels))
        keys = keys[mask]
        counts = self._counts[mask]
        op = ("filter", tuple(payload))
        return self._derive(self.schema, tuple(domains), keys, counts, op)

    def select_cells(self, dims: tuple[str, str], cells: Iterable[tuple]) -> "Cube":
        """Keep only rows whose (dims[0], dims[1]) pair lies in the cell set.

        Cartesian selectors cannot express scopes like an event spanning
        midnight (the product of its days and hours would add phantom cells),
        so this joint restriction is a first-class, replayable operation.
        """
        da, db = dims
        ia, ib = self.schema.index(da), self.schema.index(db)
        wanted = set(tuple(c) for c in cells)
        ma, mb = self._maps()[ia], self._maps()[ib]
        kept_a = tuple(v for v in self.domains[ia] if any(v == a for a, _ in wanted))
        kept_b = tuple(v for v in self.domains[ib] if any(v == b for _, b in wanted))
        width = len(self.domains[ib])
        allowed = sorted(ma[a] * width + mb[b]
                         for a, b in wanted if a in ma and b in mb)
        codes = self._keys[:, ia] * width + self._keys[:, ib]
        mask = np.isin(codes, np.array(allowed, dtype=np.int64))
        keys = self._keys[mask].copy()
        counts = self._counts[mask]
        for i, kept in ((ia, kept_a), (ib, kept_b)):
            m = self._maps()[i]
            lut = np.full(len(self.domains[i]), -1, dtype=np.int64)
            for new_id, v in enumerate(kept):
                lut[m[v]] = new_id
            if keys.size:
                keys[:, i] = lut[keys[:, i]]
        domains = list(self.domains)
        domains[ia] = kept_a
        domains[ib] = kept_b
        op = ("select_cells", (da, db), tuple(sorted(wanted)))
        return self._derive(self.schema, tuple(domains), keys, counts, op)

    # -- export ------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "schema": [[d.name, d.kind] for d in self.schema.dims],
            "cells": [[list(coord), count] for coord, count in self.iter_cells()],
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), separators=(",", ":"))

    def provenance_key(self) -> str:
        return json.dumps([self.base_id, self.provenance], default=list)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        dims = "x".join(self.schema.names) or "apex"
        return f"Cube({dims}, cells={self.support_size}, total={self.grand_total})"


def _intern_column(dim: Dimension, values: Sequence) -> tuple[np.ndarray, tuple]:
    if dim.kind == "hour":
        arr = np.asarray(values)
        if arr.size and (not np.issubdtype(arr.dtype, np.integer)
                         or arr.min() < 0 or arr.max() > 23):
            raise CubeError(f"hour values must be integers in 0..23 for {dim.name!r}")
        return arr.astype(np.int64), HOUR_DOMAIN
    labels, ids = np.unique(np.asarray(values), return_inverse=True)
    return ids.astype(np.int64), tuple(labels.tolist())


def base_cube_from_columns(schema: DimensionSchema, columns: Mapping[str, Sequence]) -> Cube:
    """Vectorized base construction from equal-length per-dimension columns."""
    lengths = {len(columns[d.name]) for d in schema.dims}
    if len(lengths) > 1:
        raise CubeError(f"column lengths differ: {sorted(lengths)}")
    n = lengths.pop() if lengths else 0
    ids = np.zeros((n, len(schema.dims)), dtype=np.int64)
    domains = []
    for j, dim in enumerate(schema.dims):
        col_ids, domain = _intern_column(dim, columns[dim.name])
        if n:
            ids[:, j] = col_ids
        domains.append(domain)
    keys, counts = _group(ids, np.ones(n, dtype=np.int64))
    return Cube(schema, tuple(domains), keys, counts, (), uuid.uuid4().hex)


def build_base_cube(records: Iterable, schema: DimensionSchema) -> Cube:
    """Count one per record; each record must carry every schema dimension."""
    cols: dict[str, list] = {d.name: [] for d in schema.dims}
    for idx, rec in enumerate(records):
        for d in schema.dims:
            v = getattr(rec, d.name, None)
            if v is None:
                raise CubeError(f"record {idx} missing dimension {d.name!r}")
            if d.kind == "hour":
                if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or not 0 <= v <= 23:
                    raise CubeError(f"record {idx}: hour {v!r} outside 0..23")
                v = int(v)
            cols[d.name].append(v)
    return base_cube_from_columns(schema, cols)


def expand(base: Cube, target_provenance: Sequence) -> Cube:
    """Re-materialize a derived cuboid by replaying its trace from the base."""
    if base.provenance:
        raise CubeError("expand must start from a base cuboid (empty provenance)")
    cube = base
    for op in target_provenance:
        kind = op[0]
        if kind == "aggregate":
            cube = cube.aggregate(op[1])
        elif kind == "partition":
            cube = cube.aggregate_partition(Partition(op[1], dict(op[2])))
        elif kind == "filter":
            cube = cube.filter(Selector({d: vs for d, vs in op[1]}))
        elif kind == "select_cells":
            cube = cube.select_cells(op[1], op[2])
        else:
            raise CubeError(f"unknown provenance op {kind!r}")
    return cube


# Spec-shaped functional aliases.

def aggregate(cube: Cube, drop_dims: Iterable[str]) -> Cube:
    return cube.aggregate(drop_dims)


def aggregate_partition(cube: Cube, partition: Partition) -> Cube:
    return cube.aggregate_partition(partition)


def filter_cube(cube: Cube, selector: Selector) -> Cube:
    return cube.filter(selector)


def cell_value(cube: Cube, coord: Sequence) -> int:
    return cube.cell_value(coord)


def grand_total(cube: Cube) -> int:
    return cube.grand_total


SCHEMA_TIME = DimensionSchema((
    Dimension("spreader"),
    Dimension("author"),
    Dimension("day", "day"),
    Dimension("hour", "hour"),
))

SCHEMA_HASHTAG = DimensionSchema((
    Dimension("spreader"),
    Dimension("author"),
    Dimension("hashtag"),
    Dimension("day", "day"),
    Dimension("hour", "hour"),
))
