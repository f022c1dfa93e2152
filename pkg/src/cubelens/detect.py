"""Event detection and drill-down analyses over interaction cubes.

The pipeline walks the same loop an analyst would: score (day, hour)
cells against an expected-value model, group abnormal hours into events,
then explain each event by re-scoring authors, spreaders and hashtags
against their own H_e baselines -- "how does this entity usually behave
at these hours of the day". Every context here compiles to a
ratio-product EstimatorSpec; this module only decides which comparison
cubes to build and how to read the resulting outlier sets.

Cubes are expected to follow the (spreader, author[, hashtag], day,
hour) naming convention of SCHEMA_TIME / SCHEMA_HASHTAG; day and hour
dimensions are located by kind, entity dimensions by name.
"""
from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import date, timedelta
from fractions import Fraction

from .cube import Cube, Partition, Selector
from .deviation import (
    ContextEvaluation,
    OutlierPolicy,
    detect_outliers,
    evaluate_context,
)
from .estimator import (
    CoordinateProjection,
    EstimatorSpec,
    EstimatorTerm,
    expected_aggregative,
    expected_basic,
    expected_ratio_product,
)


class DetectError(ValueError):
    """Invalid analysis request (missing dimension, unknown entity, ...)."""


def _dim_by_kind(cube: Cube, kind: str) -> str:
    for dim in cube.schema.dims:
        if dim.kind == kind:
            return dim.name
    raise DetectError(f"cube has no {kind} dimension: {cube.schema.names}")


def _require_dim(cube: Cube, name: str) -> str:
    if name not in cube.schema.names:
        raise DetectError(f"cube has no {name!r} dimension: {cube.schema.names}")
    return name


def _thread_count() -> int:
    raw = os.environ.get("CUBELENS_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise DetectError(f"CUBELENS_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise DetectError("CUBELENS_THREADS must be >= 1")
        return n
    return min(8, os.cpu_count() or 1)


# -- events ------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    """A maximal run of wall-clock-consecutive abnormal hours."""

    hours: tuple[tuple[object, int], ...]

    def __post_init__(self) -> None:
        if not self.hours:
            raise DetectError("an event needs at least one hour")
        for prev, cur in zip(self.hours, self.hours[1:]):
            if not _consecutive(prev, cur):
                raise DetectError(f"event hours not consecutive: {prev} -> {cur}")

    @property
    def H_e(self) -> frozenset:
        """Hour-of-day values spanned by the event (day-independent)."""
        return frozenset(h for _, h in self.hours)

    @property
    def days(self) -> tuple:
        seen: dict = {}
        for d, _ in self.hours:
            seen.setdefault(d, None)
        return tuple(seen)

    def label(self) -> str:
        (d0, h0), (d1, h1) = self.hours[0], self.hours[-1]
        if d0 == d1:
            return f"{d0} {h0}h" if h0 == h1 else f"{d0} {h0}h-{h1}h"
        return f"{d0} {h0}h - {d1} {h1}h"


def _next_day(day):
    """Successor of a day label: int + 1 or ISO date + 1 day; None if unknown."""
    if isinstance(day, bool):
        return None
    if isinstance(day, int):
        return day + 1
    if isinstance(day, str):
        try:
            return (date.fromisoformat(day) + timedelta(days=1)).isoformat()
        except ValueError:
            return None
    return None


def _consecutive(a: tuple, b: tuple) -> bool:
    (da, ha), (db, hb) = a, b
    if da == db:
        return hb == ha + 1
    return ha == 23 and hb == 0 and db == _next_day(da)


def hour_calendar(days) -> list[tuple]:
    """All (day, hour) cells of the observed days in wall-clock order."""
    return [(d, h) for d in sorted(days) for h in range(24)]


def detect_events(hour_eval: ContextEvaluation, calendar) -> list[Event]:
    """Group abnormal hours into maximal consecutive runs.

    Abnormal = positive outlier with observed > 0; silent cells (data
    gaps) therefore never extend a run, and a missing day in `calendar`
    breaks the 23h->0h bridge.
    """
    outliers = detect_outliers(hour_eval)
    observed = {cell.coord: cell.observed for cell in hour_eval.cells}
    abnormal = {
        coord for coord, _, sign in outliers.outliers
        if sign == "+" and observed.get(coord, 0) > 0
    }
    events: list[Event] = []
    run: list[tuple] = []
    for cell in calendar:
        if cell in abnormal:
            if run and not _consecutive(run[-1], cell):
                events.append(Event(tuple(run)))
                run = []
            run.append(cell)
        elif run:
            events.append(Event(tuple(run)))
            run = []
    if run:
        events.append(Event(tuple(run)))
    return events


# -- shared context plumbing -------------------------------------------------

_DEFAULT_POLICY = OutlierPolicy()

# Deviation kind used when the caller does not choose one: the basic
# context is a ratio story (its absolute counts make Poisson tails
# meaningless across day/night), the model-based ones are Poisson.
_DEFAULT_DEVIATION = {"basic": "ratio", "aggregative": "poisson", "multiagg": "poisson"}


def _he_class_cube(base: Cube, keep_dim: str, event: Event) -> Cube:
    """C(keep_dim) of volume during the event's hour-of-day class H_e.

    Partition-aggregates the hour axis into {H_e, rest} before filtering,
    so the comparison is "same hours on *all* days", not the event slice.
    """
    hour_dim = _dim_by_kind(base, "hour")
    drop = set(base.schema.names) - {keep_dim, hour_dim}
    kh = base.aggregate(drop)
    he = event.H_e
    assignment = {h: ("H_e" if h in he else "rest") for h in kh.domain(hour_dim)}
    parted = kh.aggregate_partition(Partition(hour_dim, assignment))
    return parted.filter(Selector({hour_dim: {"H_e"}})).aggregate({hour_dim})


def _event_scope(base: Cube, event: Event) -> Cube:
    day_dim = _dim_by_kind(base, "day")
    hour_dim = _dim_by_kind(base, "hour")
    return base.select_cells((day_dim, hour_dim), event.hours)


def _entity_event_context(
    base: Cube,
    event: Event,
    entity_dim: str,
    policy: OutlierPolicy,
    survival_mode: str,
) -> ContextEvaluation:
    """Observed = per-entity volume inside the event; expected = event
    total split by the entity's share of all H_e-hours activity."""
    obs = _event_scope(base, event).aggregate(set(base.schema.names) - {entity_dim})
    if obs.grand_total == 0:
        raise DetectError(f"event {event.label()} has no interactions in this cube")
    he_cube = _he_class_cube(base, entity_dim, event)
    spec = EstimatorSpec(terms=(
        EstimatorTerm(he_cube, CoordinateProjection({entity_dim: ("copy", entity_dim)}), +1),
        EstimatorTerm(obs.aggregate({entity_dim}), CoordinateProjection({}), +1),
        EstimatorTerm(he_cube.aggregate({entity_dim}), CoordinateProjection({}), -1),
    ))
    field = expected_ratio_product(obs, spec)
    return evaluate_context(obs, field, kind="poisson", policy=policy,
                            survival_mode=survival_mode)


# -- hour contexts -----------------------------------------------------------

def hour_context(
    base: Cube,
    kind: str = "multiagg",
    deviation: str | None = None,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> ContextEvaluation:
    """Score (day, hour) cells: basic (uniform), aggregative (day totals
    spread over 24 hours) or multiagg (day profile x hour profile)."""
    if kind not in _DEFAULT_DEVIATION:
        raise DetectError(f"unknown hour context {kind!r}")
    day_dim = _dim_by_kind(base, "day")
    hour_dim = _dim_by_kind(base, "hour")
    dh = base.aggregate(set(base.schema.names) - {day_dim, hour_dim})
    if kind == "basic":
        field = expected_basic(dh)
    elif kind == "aggregative":
        field = expected_aggregative(dh, {hour_dim})
    else:
        spec = EstimatorSpec(terms=(
            EstimatorTerm(dh.aggregate({hour_dim}),
                          CoordinateProjection({day_dim: ("copy", day_dim)}), +1),
            EstimatorTerm(dh.aggregate({day_dim}),
                          CoordinateProjection({hour_dim: ("copy", hour_dim)}), +1),
            EstimatorTerm(dh.aggregate({day_dim, hour_dim}),
                          CoordinateProjection({}), -1),
        ))
        field = expected_ratio_product(dh, spec)
    return evaluate_context(dh, field, kind=deviation or _DEFAULT_DEVIATION[kind],
                            policy=policy, survival_mode=survival_mode)


def find_events(
    base: Cube,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> tuple[ContextEvaluation, list[Event]]:
    """Multi-aggregative Poisson hour context piped into detect_events."""
    ev = hour_context(base, "multiagg", "poisson", policy, survival_mode)
    day_dim = _dim_by_kind(base, "day")
    return ev, detect_events(ev, hour_calendar(base.domain(day_dim)))


# -- event drill-downs -------------------------------------------------------

@dataclass(frozen=True)
class CauseClassification:
    kind: str  # one-main | several-main | no-main
    main_entities: tuple  # (entity, deviation, observed, expected), ranked


@dataclass(frozen=True)
class SpreaderRegime:
    kind: str  # global-phenomenon | activist-group | single-activist
    group: tuple  # abnormal spreaders, ranked by deviation
    share: float  # fraction of event volume they hold


def classify_cause(ev: ContextEvaluation, gap_factor: float = 3.0) -> CauseClassification:
    """One main entity iff the top positive outlier dominates the
    second-largest positive deviation by gap_factor."""
    if gap_factor <= 0:
        raise DetectError("gap_factor must be > 0")
    positives = detect_outliers(ev).positive
    if not positives:
        return CauseClassification("no-main", ())
    by_coord = {cell.coord: cell for cell in ev.cells}

    def entity(coord):
        return coord[0] if len(coord) == 1 else coord

    ranked = tuple(
        (entity(coord), dev, by_coord[coord].observed, by_coord[coord].expected)
        for coord, dev, _ in positives
    )
    top_coord, top_dev, _ = positives[0]
    runner_up = max(
        (c.deviation for c in ev.finite() if c.deviation > 0 and c.coord != top_coord),
        default=None,
    )
    if runner_up is None or top_dev >= gap_factor * runner_up:
        return CauseClassification("one-main", ranked)
    return CauseClassification("several-main", ranked)


def classify_regime(
    ev: ContextEvaluation,
    event_total: int,
    share_single: float = 0.5,
    share_group: float = 0.10,
) -> SpreaderRegime:
    """Who drove the event: one activist, a group, or nobody in particular.

    Shares are observed outlier volume over the whole event's volume
    (not just the drilled author's), matching the reported "% of event".
    """
    if event_total < 0:
        raise DetectError("event_total must be >= 0")
    positives = detect_outliers(ev).positive
    observed = {cell.coord: cell.observed for cell in ev.cells}
    held = sum(observed[coord] for coord, _, _ in positives)
    share = held / event_total if event_total else 0.0
    group = tuple(coord[0] if len(coord) == 1 else coord for coord, _, _ in positives)
    if len(group) == 1 and share >= share_single:
        return SpreaderRegime("single-activist", group, share)
    if group and share >= share_group:
        return SpreaderRegime("activist-group", group, share)
    return SpreaderRegime("global-phenomenon", group, share)


def explain_event_authors(
    base: Cube,
    event: Event,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    gap_factor: float = 3.0,
    survival_mode: str = "gt",
) -> tuple[ContextEvaluation, CauseClassification]:
    """Score authors' event volume against their usual H_e-hours share."""
    _require_dim(base, "author")
    ev = _entity_event_context(base, event, "author", policy, survival_mode)
    return ev, classify_cause(ev, gap_factor)


def explain_event_spreaders(
    base: Cube,
    event: Event,
    main_author,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> tuple[ContextEvaluation, SpreaderRegime]:
    """Score how each spreader retweeted main_author during the event."""
    _require_dim(base, "spreader")
    author_dim = _require_dim(base, "author")
    narrowed = base.filter(Selector({author_dim: {main_author}}))
    if narrowed.grand_total == 0:
        raise DetectError(f"author {main_author!r} has no recorded activity")
    reduced = narrowed.aggregate({author_dim})
    he_total = _he_class_cube(reduced, "spreader", event).grand_total
    if he_total == 0:
        raise DetectError(
            f"author {main_author!r} has no activity during hours {sorted(event.H_e)}")
    ev = _entity_event_context(reduced, event, "spreader", policy, survival_mode)
    event_total = _event_scope(base, event).grand_total
    return ev, classify_regime(ev, event_total)


# -- hashtags ----------------------------------------------------------------

def hashtag_context(
    base5: Cube,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> ContextEvaluation:
    """Score (hashtag, day, hour) cells: each hashtag-day's volume
    redistributed over hours by the global hour profile."""
    hashtag_dim = _require_dim(base5, "hashtag")
    day_dim = _dim_by_kind(base5, "day")
    hour_dim = _dim_by_kind(base5, "hour")
    kdh = base5.aggregate(set(base5.schema.names) - {hashtag_dim, day_dim, hour_dim})
    spec = EstimatorSpec(terms=(
        EstimatorTerm(kdh.aggregate({hour_dim}),
                      CoordinateProjection({hashtag_dim: ("copy", hashtag_dim),
                                            day_dim: ("copy", day_dim)}), +1),
        EstimatorTerm(kdh.aggregate({hashtag_dim, day_dim}),
                      CoordinateProjection({hour_dim: ("copy", hour_dim)}), +1),
        EstimatorTerm(kdh.aggregate({hashtag_dim, day_dim, hour_dim}),
                      CoordinateProjection({}), -1),
    ))
    field = expected_ratio_product(kdh, spec)
    return evaluate_context(kdh, field, kind="poisson", policy=policy,
                            survival_mode=survival_mode)


def abnormal_hashtags_global(
    base5: Cube,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> list[tuple]:
    """(hashtag, day, hour, deviation) outliers, strongest first."""
    ev = hashtag_context(base5, policy, survival_mode)
    return [(k, d, h, dev) for (k, d, h), dev, _ in detect_outliers(ev).outliers]


def event_hashtag_context(
    base5: Cube,
    event: Event,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> ContextEvaluation:
    """Hashtag volume inside the event vs the tag's usual H_e-hours share
    (the author model with hashtags in the entity seat)."""
    _require_dim(base5, "hashtag")
    return _entity_event_context(base5, event, "hashtag", policy, survival_mode)


def abnormal_hashtags_for_event(
    base5: Cube,
    event: Event,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    survival_mode: str = "gt",
) -> list:
    """Hashtags over-represented inside the event scope."""
    ev = event_hashtag_context(base5, event, policy, survival_mode)
    return [coord[0] for coord, _, sign in detect_outliers(ev).outliers if sign == "+"]


# -- topics ------------------------------------------------------------------

@dataclass(frozen=True)
class Topic:
    hashtags: tuple
    spreaders: frozenset  # S*: abnormal spreaders common to all hashtags
    authors: frozenset  # A*: abnormal authors common to all hashtags


def _topic_entity_sets(base5, hashtag, policy, survival_mode):
    """S*_k and A*_k: entities with at least one positive-outlier hour
    cell for hashtag k, judged against their global hour profile."""
    hashtag_dim = _require_dim(base5, "hashtag")
    day_dim = _dim_by_kind(base5, "day")
    hour_dim = _dim_by_kind(base5, "hour")
    kdh_k = (base5.aggregate(set(base5.schema.names) - {hashtag_dim, day_dim, hour_dim})
             .filter(Selector({hashtag_dim: {hashtag}}))
             .aggregate({hashtag_dim}))
    hour_total = base5.aggregate(set(base5.schema.names) - {hour_dim})
    sets = []
    for entity_dim in ("spreader", "author"):
        _require_dim(base5, entity_dim)
        obs = (base5.aggregate(set(base5.schema.names)
                               - {entity_dim, hashtag_dim, day_dim, hour_dim})
               .filter(Selector({hashtag_dim: {hashtag}}))
               .aggregate({hashtag_dim}))
        entity_hour = base5.aggregate(set(base5.schema.names) - {entity_dim, hour_dim})
        spec = EstimatorSpec(terms=(
            EstimatorTerm(kdh_k, CoordinateProjection({day_dim: ("copy", day_dim),
                                                       hour_dim: ("copy", hour_dim)}), +1),
            EstimatorTerm(entity_hour,
                          CoordinateProjection({entity_dim: ("copy", entity_dim),
                                                hour_dim: ("copy", hour_dim)}), +1),
            EstimatorTerm(hour_total, CoordinateProjection({hour_dim: ("copy", hour_dim)}), -1),
        ))
        # Explicit domain: the hashtag's own support. The first +1 term
        # has the entity free, so the default policy would enumerate
        # |entities| x support(k) cells for no gain -- an entity absent
        # from a cell cannot be a positive outlier there.
        field = expected_ratio_product(obs, spec, domain=obs.coords())
        ev = evaluate_context(obs, field, kind="poisson", policy=policy,
                              survival_mode=survival_mode)
        sets.append(frozenset(coord[0] for coord, _, sign in detect_outliers(ev).outliers
                              if sign == "+"))
    return sets[0], sets[1]


def topics_from_sets(spreader_sets, author_sets, candidates, n, prefilter=True) -> list[Topic]:
    """Enumerate size-n hashtag subsets with non-empty common S* and A*.

    prefilter=True prunes by pairwise compatibility and running
    intersections (sound: intersections only shrink as the subset
    grows); prefilter=False is the exhaustive reference used in tests.
    """
    keys = sorted(candidates)
    if not prefilter:
        topics = []
        for combo in itertools.combinations(keys, n):
            common_s = frozenset.intersection(*(spreader_sets[k] for k in combo))
            if not common_s:
                continue
            common_a = frozenset.intersection(*(author_sets[k] for k in combo))
            if common_a:
                topics.append(Topic(combo, common_s, common_a))
        return topics

    compatible = {}
    for a, b in itertools.combinations(keys, 2):
        compatible[(a, b)] = bool(spreader_sets[a] & spreader_sets[b]) and bool(
            author_sets[a] & author_sets[b])
    topics = []
    chosen: list = []

    def grow(start: int, common_s: frozenset | None, common_a: frozenset | None) -> None:
        if len(chosen) == n:
            topics.append(Topic(tuple(chosen), common_s, common_a))
            return
        for i in range(start, len(keys)):
            key = keys[i]
            if any(not compatible[(prev, key)] for prev in chosen):
                continue
            next_s = spreader_sets[key] if common_s is None else common_s & spreader_sets[key]
            if not next_s:
                continue
            next_a = author_sets[key] if common_a is None else common_a & author_sets[key]
            if not next_a:
                continue
            chosen.append(key)
            grow(i + 1, next_s, next_a)
            chosen.pop()

    grow(0, None, None)
    return topics


def discover_topics(
    base5: Cube,
    candidates,
    n: int,
    policy: OutlierPolicy = _DEFAULT_POLICY,
    prefilter: bool = True,
    survival_mode: str = "gt",
) -> list[Topic]:
    """Find all size-n hashtag sets retweeted intensely by common users."""
    keys = sorted(set(candidates))
    if not keys:
        raise DetectError("candidates must be non-empty")
    if n < 1:
        raise DetectError("topic size must be >= 1")
    if n > len(keys):
        raise DetectError(f"topic size {n} exceeds {len(keys)} candidates")
    workers = min(_thread_count(), len(keys))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_key = list(pool.map(
                lambda k: _topic_entity_sets(base5, k, policy, survival_mode), keys))
    else:
        per_key = [_topic_entity_sets(base5, k, policy, survival_mode) for k in keys]
    spreader_sets = {k: s for k, (s, _) in zip(keys, per_key)}
    author_sets = {k: a for k, (_, a) in zip(keys, per_key)}
    return topics_from_sets(spreader_sets, author_sets, keys, n, prefilter)


# -- link prediction ---------------------------------------------------------

@dataclass(frozen=True)
class CommunityAssignment:
    """spreader -> community label, loaded from a communities file."""

    assignment: dict

    def community_of(self, spreader):
        try:
            return self.assignment[spreader]
        except KeyError:
            raise DetectError(f"no community recorded for {spreader!r}") from None

    def members(self, label) -> frozenset:
        found = frozenset(s for s, c in self.assignment.items() if c == label)
        if not found:
            raise DetectError(f"unknown community {label!r}")
        return found


def predict_user_topic(
    base5: Cube,
    communities: CommunityAssignment,
    spreader,
    hashtags,
    day,
    hour: int,
    variant: str = "literal",
) -> float | None:
    """Expected retweets of topic `hashtags` by `spreader` at (day, hour):
    community topic share x user's hour share within the community x
    mean topic volume at that slot. None when a factor is unsupported
    (zero denominator).

    variant="literal" uses the topic's volume on the requested day over
    |D|; "mean-day" uses its all-days hour profile instead.
    """
    if variant not in ("literal", "mean-day"):
        raise DetectError(f"unknown prediction variant {variant!r}")
    spreader_dim = _require_dim(base5, "spreader")
    hashtag_dim = _require_dim(base5, "hashtag")
    day_dim = _dim_by_kind(base5, "day")
    hour_dim = _dim_by_kind(base5, "hour")
    topic = set(hashtags)
    if not topic:
        raise DetectError("prediction needs at least one hashtag")
    missing = topic - set(base5.domain(hashtag_dim))
    if missing:
        raise DetectError(f"hashtags absent from data: {sorted(missing)}")
    members = communities.members(communities.community_of(spreader))

    topic_cube = base5.filter(Selector({hashtag_dim: topic}))
    community_topic = topic_cube.filter(Selector({spreader_dim: members})).grand_total
    topic_total = topic_cube.grand_total
    hour_cube = base5.filter(Selector({hour_dim: {hour}}))
    user_hour = hour_cube.filter(Selector({spreader_dim: {spreader}})).grand_total
    community_hour = hour_cube.filter(Selector({spreader_dim: members})).grand_total
    topic_hour = topic_cube.filter(Selector({hour_dim: {hour}}))
    if variant == "literal":
        slot = topic_hour.filter(Selector({day_dim: {day}})).grand_total
    else:
        slot = topic_hour.grand_total
    n_days = len(base5.domain(day_dim))

    if 0 in (topic_total, community_hour, n_days):
        return None
    return float(Fraction(community_topic, topic_total)
                 * Fraction(user_hour, community_hour)
                 * Fraction(slot, n_days))
