"""Expected-value models over cubes.

Every model here reduces to one shape: a positive rational constant times
a product of comparison-cube lookups raised to +1 or -1. The three
families are

* basic        -- the grand total spread uniformly over the cell domain,
* aggregative  -- a parent aggregate split uniformly over the dimensions
                  that were summed out,
* ratio product -- arbitrary products such as
                  day_total x hour_total / grand_total,

and the first two are just convenient constructors for the third. All
comparison cubes must derive from the same base cuboid as the observed
cube, which guarantees a child cell can never exceed the aggregate it is
compared against.

Cell enumeration policy: by default a field covers the observed support
plus the support induced by the first +1 term (its support cells, with
unprojected observed dimensions ranging over their domains). A full
Cartesian product over all observed dimensions is never built unless the
first +1 term is the apex, which only the basic model uses. Callers may
pass an explicit domain instead.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .cube import Cube, CubeError


class EstimatorError(ValueError):
    """Bad estimator construction or evaluation preconditions."""


class ConsistencyError(RuntimeError):
    """A denominator lookup was 0 while the numerator was positive.

    Impossible when every comparison cube derives from the observed cube's
    base (an aggregate dominates its children), so this signals corrupted
    inputs rather than a modelling choice.
    """


@dataclass(frozen=True)
class CoordinateProjection:
    """How an observed coordinate maps onto a comparison-cube coordinate.

    One entry per comparison-cube dimension: ("copy", source_dim) takes the
    observed label of source_dim; ("fixed", value) pins a constant label
    (e.g. a partition class).
    """

    assigns: Mapping

    def __post_init__(self) -> None:
        object.__setattr__(self, "assigns", dict(self.assigns))
        for target, rule in self.assigns.items():
            if not (isinstance(rule, tuple) and len(rule) == 2 and rule[0] in ("copy", "fixed")):
                raise EstimatorError(f"bad projection rule for {target!r}: {rule!r}")

    @classmethod
    def copies(cls, *dims: str) -> "CoordinateProjection":
        return cls({d: ("copy", d) for d in dims})


@dataclass(frozen=True)
class EstimatorTerm:
    cube: Cube
    projection: CoordinateProjection
    exponent: int

    def __post_init__(self) -> None:
        if self.exponent not in (1, -1):
            raise EstimatorError(f"exponent must be +1 or -1, got {self.exponent}")
        targets = set(self.projection.assigns)
        names = set(self.cube.schema.names)
        if targets != names:
            raise EstimatorError(
                f"projection must assign every comparison dimension exactly once; "
                f"got {sorted(targets)} for cube dims {sorted(names)}")


@dataclass(frozen=True)
class EstimatorSpec:
    terms: tuple[EstimatorTerm, ...]
    constant: Fraction = Fraction(1)

    def __post_init__(self) -> None:
        if not self.terms:
            raise EstimatorError("estimator needs at least one term")
        if self.constant <= 0:
            raise EstimatorError("constant must be positive")


@dataclass(frozen=True)
class ExpectedField:
    """Expected value per enumerated cell of an observed cube."""

    obs: Cube
    values: Mapping
    unsupported: frozenset
    policy: str

    def __iter__(self):
        return iter(sorted(self.values.items()))

    def total(self) -> float:
        return float(sum(self.values.values()))


def _project(term: EstimatorTerm, obs: Cube, coord: tuple) -> tuple:
    out = []
    for name in term.cube.schema.names:
        kind, arg = term.projection.assigns[name]
        if kind == "copy":
            out.append(coord[obs.schema.index(arg)])
        else:
            out.append(arg)
    return tuple(out)


def _induced_domain(obs: Cube, term: EstimatorTerm) -> set:
    """Observed cells implied by a +1 term: its support back-projected, with
    free observed dimensions ranging over their domains."""
    copy_of = {}
    fixed = {}
    for target, (kind, arg) in term.projection.assigns.items():
        if kind == "copy":
            copy_of[arg] = target
        else:
            fixed[target] = arg
    axes = []
    term_idx = {n: i for i, n in enumerate(term.cube.schema.names)}
    support = list(term.cube.iter_cells())
    out: set = set()
    for cell, _ in support:
        if any(cell[term_idx[t]] != v for t, v in fixed.items()):
            continue
        for name in obs.schema.names:
            if name in copy_of:
                axes.append((cell[term_idx[copy_of[name]]],))
            else:
                axes.append(obs.domain(name))
        out.update(itertools.product(*axes))
        axes.clear()
    return out


def evaluate(obs: Cube, spec: EstimatorSpec, domain: Iterable[tuple] | None = None,
             policy: str = "") -> ExpectedField:
    """Evaluate a ratio-product estimator over an enumerated cell domain.

    Constants stay exact rationals until the final multiplication. A cell
    whose denominator product is 0 gets expected 0 and an `unsupported`
    flag; if its numerator is positive at the same time, the comparison
    cubes cannot share the observed cube's base and ConsistencyError is
    raised.
    """
    for t in spec.terms:
        if t.cube.base_id != obs.base_id:
            raise EstimatorError("comparison cube does not derive from the observed cube's base")
    if domain is None:
        cells = {coord for coord, _ in obs.iter_cells()}
        first_plus = next((t for t in spec.terms if t.exponent == 1), None)
        if first_plus is not None:
            cells |= _induced_domain(obs, first_plus)
        domain = cells
        policy = policy or "observed-support + first-positive-term induced support"
    else:
        domain = set(tuple(c) for c in domain)
        policy = policy or "explicit domain"
    values = {}
    unsupported = set()
    for coord in domain:
        num = 1
        den = 1
        for t in spec.terms:
            v = t.cube.cell_value(_project(t, obs, coord))
            if t.exponent == 1:
                num *= v
            else:
                den *= v
        if den == 0:
            if num != 0:
                raise ConsistencyError(f"zero denominator with positive numerator at {coord!r}")
            values[coord] = 0.0
            unsupported.add(coord)
        else:
            values[coord] = float(spec.constant * Fraction(num, den))
    return ExpectedField(obs, values, frozenset(unsupported), policy)


def expected_basic(obs: Cube) -> ExpectedField:
    """Uniform model: every cell of the dense domain gets total/|X|.

    |X| is the size of the enumerated grid (product of the observed cube's
    per-dimension domains), so the field mass equals the grand total
    exactly. Meant for low-dimensional cubes such as day x hour.
    """
    if obs.grand_total == 0:
        raise EstimatorError("basic model undefined on an empty cube")
    grid = list(itertools.product(*obs.domains))
    value = obs.grand_total / len(grid)
    return ExpectedField(obs, {coord: value for coord in grid}, frozenset(),
                         f"dense grid, |X|={len(grid)}")


def expected_aggregative(obs: Cube, agg_dims: Iterable[str]) -> ExpectedField:
    """Parent aggregate split uniformly over the summed-out dimensions Y.

    f_exp(x', y) = f(x') / |Y-domain|; per parent cell the enumerated
    children are its full Y slab, so the children of x' sum back to f(x').
    """
    drop = frozenset(agg_dims)
    if not drop:
        raise EstimatorError("aggregative model needs at least one dimension to sum out")
    names = set(obs.schema.names)
    if not drop <= names:
        raise EstimatorError(f"unknown dimensions {sorted(drop - names)}")
    if drop == names:
        raise EstimatorError("aggregating every dimension is the basic model; use expected_basic")
    parent = obs.aggregate(drop)
    slab = [obs.domain(d) if d in drop else None for d in obs.schema.names]
    denom = 1
    for d in drop:
        denom *= len(obs.domain(d))
    if denom == 0:
        raise EstimatorError("aggregated dimension has empty domain")
    values = {}
    kept = [i for i, d in enumerate(obs.schema.names) if d not in drop]
    for pcell, count in parent.iter_cells():
        per = count / denom
        axes = []
        for i, dom in enumerate(slab):
            if dom is None:
                axes.append((pcell[kept.index(i)],))
            else:
                axes.append(dom)
        for coord in itertools.product(*axes):
            values[coord] = per
    return ExpectedField(obs, values, frozenset(),
                         f"parent support x Y-domain, |Y|={denom}")


def expected_ratio_product(obs: Cube, spec: EstimatorSpec,
                           domain: Iterable[tuple] | None = None) -> ExpectedField:
    return evaluate(obs, spec, domain=domain)


_TOKEN = re.compile(r"\s*(cube\s*\(([^)]*)\)|\d+(?:\.\d+)?|\*|/|=|expect)\s*")


def parse_estimator_text(text: str, base: Cube) -> EstimatorSpec:
    """Parse the declarative form, e.g. `expect = cube(day)*cube(hour)/cube()`.

    Grammar: optional `expect =` prefix, then factors separated by * or /.
    A factor is either a number (folded into the constant) or cube(dims)
    meaning the base aggregated down to exactly those dimensions, matched
    to the observed cube by same-name copy projections. cube() is the apex.
    """
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise EstimatorError(f"cannot parse estimator text at: {text[pos:]!r}")
        tokens.append((m.group(1), m.group(2)))
        pos = m.end()
    if tokens and tokens[0][0] == "expect":
        tokens = tokens[1:]
        if not tokens or tokens[0][0] != "=":
            raise EstimatorError("expected '=' after 'expect'")
        tokens = tokens[1:]
    terms = []
    constant = Fraction(1)
    sign = 1
    expect_factor = True
    for raw, dims in tokens:
        if raw == "*":
            if expect_factor:
                raise EstimatorError("misplaced '*'")
            sign, expect_factor = 1, True
        elif raw == "/":
            if expect_factor:
                raise EstimatorError("misplaced '/'")
            sign, expect_factor = -1, True
        elif raw == "=" or raw == "expect":
            raise EstimatorError(f"misplaced {raw!r}")
        elif raw.startswith("cube"):
            names = tuple(n.strip() for n in dims.split(",") if n.strip()) if dims else ()
            unknown = [n for n in names if n not in base.schema.names]
            if unknown:
                raise EstimatorError(
                    f"estimator references unknown dimensions {unknown}; "
                    f"cube has {list(base.schema.names)}")
            cmp_cube = base.aggregate(set(base.schema.names) - set(names))
            terms.append(EstimatorTerm(cmp_cube, CoordinateProjection.copies(*names), sign))
            expect_factor = False
        else:
            f = Fraction(raw)
            constant = constant * f if sign == 1 else constant / f
            expect_factor = False
    if expect_factor:
        raise EstimatorError("estimator text ends with a dangling operator")
    if not terms:
        raise EstimatorError("estimator text names no cubes")
    return EstimatorSpec(tuple(terms), constant)
