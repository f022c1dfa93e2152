"""Event grouping, drill-downs, cause/regime rules, topics, prediction."""
from __future__ import annotations

import math

import numpy as np
import pytest

from cubelens.cube import SCHEMA_HASHTAG, SCHEMA_TIME
from cubelens.detect import (
    CommunityAssignment,
    DetectError,
    Event,
    Topic,
    abnormal_hashtags_for_event,
    abnormal_hashtags_global,
    classify_cause,
    classify_regime,
    detect_events,
    discover_topics,
    explain_event_authors,
    explain_event_spreaders,
    find_events,
    hour_calendar,
    hour_context,
    predict_user_topic,
    topics_from_sets,
)
from cubelens.deviation import CellEval, ContextEvaluation, OutlierPolicy
from conftest import cube_from_counts


def hour_eval(abnormal, days, spike=80.0):
    """(day,hour) evaluation where `abnormal` coords carry a huge deviation."""
    cells = []
    values = []
    for d in days:
        for h in range(24):
            dev = spike if (d, h) in abnormal else 0.0
            cells.append(CellEval((d, h), int(dev), 1.0, dev))
            values.append(dev)
    arr = np.array(values)
    return ContextEvaluation(tuple(cells), "ratio", OutlierPolicy(),
                             float(arr.mean()), float(arr.std()))


def entity_eval(observed: dict, expected=1.0, policy=OutlierPolicy()):
    """1-dim ratio evaluation: deviation = observed / expected."""
    cells = tuple(CellEval((e,), n, expected, n / expected)
                  for e, n in observed.items())
    arr = np.array([c.deviation for c in cells])
    return ContextEvaluation(cells, "ratio", policy,
                             float(arr.mean()), float(arr.std()))


# -- events --------------------------------------------------------------------

def test_three_events_from_listed_hours():
    abnormal = {(24, 20), (24, 21), (24, 22), (25, 19), (28, 14), (28, 15)}
    days = [24, 25, 28]
    events = detect_events(hour_eval(abnormal, days), hour_calendar(days))
    assert [e.hours for e in events] == [
        ((24, 20), (24, 21), (24, 22)), ((25, 19),), ((28, 14), (28, 15))]
    assert [e.label() for e in events] == ["24 20h-22h", "25 19h", "28 14h-15h"]


def test_cross_midnight_single_event():
    abnormal = {(12, 22), (12, 23), (13, 0), (13, 1)}
    days = [12, 13]
    events = detect_events(hour_eval(abnormal, days), hour_calendar(days))
    assert len(events) == 1
    assert events[0].hours == ((12, 22), (12, 23), (13, 0), (13, 1))
    assert events[0].H_e == {22, 23, 0, 1}
    assert events[0].days == (12, 13)


def test_cross_midnight_iso_days():
    abnormal = {("2016-08-31", 23), ("2016-09-01", 0)}
    days = ["2016-08-31", "2016-09-01"]
    events = detect_events(hour_eval(abnormal, days), hour_calendar(days))
    assert len(events) == 1
    assert events[0].label() == "2016-08-31 23h - 2016-09-01 0h"


def test_missing_day_breaks_midnight_bridge():
    # day 13 absent from data: 12@23h and 14@0h cannot join
    abnormal = {(12, 23), (14, 0)}
    days = [12, 14]
    events = detect_events(hour_eval(abnormal, days), hour_calendar(days))
    assert len(events) == 2


def test_no_abnormal_hours_no_events():
    assert detect_events(hour_eval(set(), [1, 2]), hour_calendar([1, 2])) == []


def test_negative_outliers_never_form_events():
    cells, values = [], []
    for h in range(24):
        dev = -80.0 if h == 3 else 0.0
        cells.append(CellEval((1, h), 5, 1.0, dev))
        values.append(dev)
    arr = np.array(values)
    ev = ContextEvaluation(tuple(cells), "ratio", OutlierPolicy(),
                           float(arr.mean()), float(arr.std()))
    assert detect_events(ev, hour_calendar([1])) == []


def test_event_maximality_and_partition():
    abnormal = {(5, 1), (5, 2), (5, 10), (6, 23), (7, 0)}
    days = [5, 6, 7]
    events = detect_events(hour_eval(abnormal, days), hour_calendar(days))
    covered = [cell for e in events for cell in e.hours]
    assert sorted(covered) == sorted(abnormal)       # partition: all, once
    for e in events:
        first, last = e.hours[0], e.hours[-1]
        prev = (first[0], first[1] - 1) if first[1] else (first[0] - 1, 23)
        nxt = (last[0], last[1] + 1) if last[1] < 23 else (last[0] + 1, 0)
        assert prev not in abnormal and nxt not in abnormal


def test_event_requires_consecutive_hours():
    with pytest.raises(DetectError):
        Event(((1, 3), (1, 5)))
    with pytest.raises(DetectError):
        Event(())


# -- hour contexts ----------------------------------------------------------------

def _flat_base(days=("d1", "d2"), volume=2):
    cells = {}
    for d in days:
        for h in range(24):
            cells[("s1", "a1", d, h)] = volume
    return cube_from_counts(SCHEMA_TIME, cells)


def test_hour_context_families():
    base = _flat_base()
    for kind, deviation in (("basic", "ratio"), ("aggregative", "poisson"),
                            ("multiagg", "poisson")):
        ev = hour_context(base, kind)
        assert ev.kind == deviation
        assert len(ev.cells) == 48
        # perfectly uniform data: expected equals observed everywhere
        for c in ev.cells:
            assert c.expected == pytest.approx(c.observed)


def test_hour_context_unknown_kind():
    with pytest.raises(DetectError):
        hour_context(_flat_base(), "fancy")


def test_find_events_flags_planted_spike():
    cells = {("s1", "a1", d, h): 4 for d in ("2016-08-01", "2016-08-02",
                                             "2016-08-03", "2016-08-04")
             for h in range(24)}
    cells[("s2", "a1", "2016-08-03", 15)] = 60
    base = cube_from_counts(SCHEMA_TIME, cells)
    _, events = find_events(base)
    assert [e.hours for e in events] == [(("2016-08-03", 15),)]


# -- author drill-down ----------------------------------------------------------

def _author_event_base():
    # 3 authors, flat history 10/hour at hour 12 across d1..d4;
    # event day d5: a2 bursts to 60, a1/a3 stay at 10
    cells = {}
    for d in ("d1", "d2", "d3", "d4"):
        for a in ("a1", "a2", "a3"):
            cells[("s1", a, d, 12)] = 10
    cells[("s1", "a1", "d5", 12)] = 10
    cells[("s1", "a2", "d5", 12)] = 60
    cells[("s1", "a3", "d5", 12)] = 10
    return cube_from_counts(SCHEMA_TIME, cells)


def test_author_expected_follows_he_share():
    base = _author_event_base()
    event = Event((("d5", 12),))
    ev, _ = explain_event_authors(base, event)
    expected = {c.coord[0]: c.expected for c in ev.cells}
    # event total 80; H_e shares: a1/a3 50/200, a2 100/200
    assert expected["a1"] == pytest.approx(20.0)
    assert expected["a2"] == pytest.approx(40.0)
    assert expected["a3"] == pytest.approx(20.0)
    assert sum(expected.values()) == pytest.approx(80.0, rel=1e-9)


def test_author_burst_flagged_at_low_sigma():
    # 3 cells cap the attainable z-score below 3; sigma=1 shows the intent
    base = _author_event_base()
    event = Event((("d5", 12),))
    ev, cause = explain_event_authors(
        base, event, policy=OutlierPolicy(sigma_multiplier=1.0))
    assert cause.kind == "one-main"
    assert cause.main_entities[0][0] == "a2"


def test_author_event_covering_all_data_is_neutral():
    cells = {("s1", "a1", "d1", 5): 30}
    base = cube_from_counts(SCHEMA_TIME, cells)
    event = Event((("d1", 5),))
    ev, cause = explain_event_authors(base, event)
    (cell,) = ev.cells
    assert cell.observed == 30
    assert cell.expected == pytest.approx(30.0)
    assert cell.deviation == pytest.approx(0.0, abs=1e-9)
    assert cause.kind == "no-main"


# -- cause classification ----------------------------------------------------------

def test_cause_dominant_top():
    observed = {f"a{i}": 0 for i in range(3000)}
    observed.update({"big": 1200, "second": 80})
    cause = classify_cause(entity_eval(observed))
    assert cause.kind == "one-main"
    assert cause.main_entities[0][0] == "big"


def test_cause_single_positive_outlier_vacuous():
    observed = {f"a{i}": 0 for i in range(500)}
    observed["big"] = 1200
    cause = classify_cause(entity_eval(observed))
    assert cause.kind == "one-main"


def test_cause_comparable_outliers():
    observed = {f"a{i}": 0 for i in range(3000)}
    observed.update({"p1": 300, "p2": 280, "p3": 260, "p4": 250, "p5": 240})
    cause = classify_cause(entity_eval(observed))
    assert cause.kind == "several-main"
    assert {e for e, *_ in cause.main_entities} == {"p1", "p2", "p3", "p4", "p5"}


def test_cause_no_positive_outliers():
    observed = {f"a{i}": 10 for i in range(200)}
    observed["quiet"] = 0
    cause = classify_cause(entity_eval(observed, expected=10.0))
    assert cause.kind == "no-main"
    assert cause.main_entities == ()


def test_cause_gap_factor_tunable():
    observed = {f"a{i}": 0 for i in range(3000)}
    observed.update({"big": 400, "second": 200})
    assert classify_cause(entity_eval(observed), gap_factor=3.0).kind == "several-main"
    assert classify_cause(entity_eval(observed), gap_factor=1.5).kind == "one-main"


# -- spreader drill-down -------------------------------------------------------------

def _spreader_event_base(event_volume=73, spreaders=15):
    # every spreader retweets a* 2/day at hour 3 over 4 days; at the event
    # only s0 acts, `event_volume` times
    cells = {}
    for d in ("d1", "d2", "d3", "d4"):
        for i in range(spreaders):
            cells[(f"s{i}", "astar", d, 3)] = 2
    cells[("s0", "astar", "d5", 3)] = event_volume
    return cube_from_counts(SCHEMA_TIME, cells)


def test_spreader_single_activist():
    base = _spreader_event_base()
    event = Event((("d5", 3),))
    ev, regime = explain_event_spreaders(base, event, "astar")
    assert regime.kind == "single-activist"
    assert regime.group == ("s0",)
    assert regime.share == pytest.approx(1.0)


def test_spreader_mass_matches_author_event_volume():
    base = _spreader_event_base()
    event = Event((("d5", 3),))
    ev, _ = explain_event_spreaders(base, event, "astar")
    assert sum(c.expected for c in ev.cells) == pytest.approx(73.0, rel=1e-9)


def test_spreader_flat_event_is_global_phenomenon():
    # identical history and identical event behavior: zero dispersion
    cells = {}
    for d in ("d1", "d2"):
        for i in range(12):
            cells[(f"s{i}", "astar", d, 3)] = 2
    base = cube_from_counts(SCHEMA_TIME, cells)
    event = Event((("d2", 3),))
    with pytest.warns(UserWarning, match="zero dispersion"):
        _, regime = explain_event_spreaders(base, event, "astar")
    assert regime.kind == "global-phenomenon"
    assert regime.group == ()


def test_spreader_unknown_author_rejected():
    base = _spreader_event_base()
    event = Event((("d5", 3),))
    with pytest.raises(DetectError, match="no recorded activity"):
        explain_event_spreaders(base, event, "ghost")


def test_spreader_author_without_he_activity_rejected():
    cells = {("s1", "a1", "d1", 3): 5, ("s1", "a2", "d1", 9): 5}
    base = cube_from_counts(SCHEMA_TIME, cells)
    event = Event((("d1", 3),))
    with pytest.raises(DetectError, match="no activity during hours"):
        explain_event_spreaders(base, event, "a2")


# -- regime classification -------------------------------------------------------------

def test_regime_thresholds():
    observed = {f"s{i}": 0 for i in range(3000)}
    observed["solo"] = 200
    ev = entity_eval(observed)
    assert classify_regime(ev, event_total=200).kind == "single-activist"
    # same single outlier at 16% of the event: group regime
    assert classify_regime(ev, event_total=1250).kind == "activist-group"
    # below the 10% share floor: background noise
    assert classify_regime(ev, event_total=5000).kind == "global-phenomenon"


def test_regime_group_share():
    observed = {f"s{i}": 0 for i in range(3000)}
    observed.update({"g1": 40, "g2": 40})
    regime = classify_regime(entity_eval(observed), event_total=200)
    assert regime.kind == "activist-group"
    assert set(regime.group) == {"g1", "g2"}
    assert regime.share == pytest.approx(0.4)


def test_regime_no_outliers_is_global():
    observed = {f"s{i}": 5 for i in range(100)}
    with pytest.warns(UserWarning, match="zero dispersion"):
        regime = classify_regime(entity_eval(observed, expected=5.0), event_total=500)
    assert regime.kind == "global-phenomenon"


# -- hashtag anomalies ------------------------------------------------------------------

def _hashtag_base_flat_profile():
    # background tags keep every hour's global total at 148 while k* puts
    # all 48 of its occurrences into (d1, 5)
    cells = {}
    for i in range(4):
        for h in range(24):
            cells[("s1", "a1", f"bg{i}", "d1", h)] = 25 if h == 5 else 37
    cells[("s1", "a1", "kstar", "d1", 5)] = 48
    return cube_from_counts(SCHEMA_HASHTAG, cells)


def test_global_hashtag_burst_flagged():
    base5 = _hashtag_base_flat_profile()
    triplets = abnormal_hashtags_global(base5)
    assert triplets, "burst hashtag not flagged"
    k, d, h, dev = triplets[0]
    assert (k, d, h) == ("kstar", "d1", 5)
    assert dev > 0
    # the model's expected value for the burst cell: 48 * (148 / 3552) = 2
    ev = [c for c in __import__("cubelens.detect", fromlist=["hashtag_context"])
          .hashtag_context(base5).cells if c.coord == ("kstar", "d1", 5)]
    assert ev[0].expected == pytest.approx(2.0)
    assert ev[0].observed == 48


def test_uniform_hashtag_not_flagged():
    base5 = _hashtag_base_flat_profile()
    triplets = abnormal_hashtags_global(base5)
    assert all(k != "bg0" or dev < 0 for k, _, _, dev in triplets)


def test_event_hashtag_share_burst():
    # k1 takes 90% of the event volume against a 5% historical share
    cells = {}
    for d in ("d1", "d2", "d3", "d4"):
        for i in range(20):
            cells[("s1", "a1", f"k{i}", d, 10)] = 5
    cells[("s1", "a1", "k0", "d5", 10)] = 90
    for i in range(1, 11):
        cells[("s1", "a1", f"k{i}", "d5", 10)] = 1
    base5 = cube_from_counts(SCHEMA_HASHTAG, cells)
    event = Event((("d5", 10),))
    assert abnormal_hashtags_for_event(base5, event) == ["k0"]


def test_event_single_hashtag_degenerate():
    cells = {("s1", "a1", "k1", "d1", 10): 5, ("s1", "a1", "k1", "d2", 10): 50}
    base5 = cube_from_counts(SCHEMA_HASHTAG, cells)
    event = Event((("d2", 10),))
    with pytest.warns(UserWarning, match="fewer than 2"):
        assert abnormal_hashtags_for_event(base5, event) == []


# -- topics -------------------------------------------------------------------------

def test_topic_intersection_rule():
    spreaders = {"k1": {"s1"}, "k2": {"s2"}, "k3": {"s2", "s3"}}
    authors = {"k1": {"a1"}, "k2": {"a1"}, "k3": {"a1"}}
    none3 = topics_from_sets(spreaders, authors, ["k1", "k2", "k3"], 3)
    assert none3 == []
    two = topics_from_sets(spreaders, authors, ["k1", "k2", "k3"], 2)
    assert [t.hashtags for t in two] == [("k2", "k3")]
    assert two[0].spreaders == frozenset({"s2"})
    assert two[0].authors == frozenset({"a1"})


def test_topics_n1_every_nonempty_pair():
    spreaders = {"k1": {"s1"}, "k2": set()}
    authors = {"k1": {"a1"}, "k2": {"a2"}}
    topics = topics_from_sets(spreaders, authors, ["k1", "k2"], 1)
    assert [t.hashtags for t in topics] == [("k1",)]


def test_topics_prefilter_equals_exhaustive_random_sets():
    rng = np.random.default_rng(42)
    for _ in range(40):
        keys = [f"k{i}" for i in range(int(rng.integers(2, 9)))]
        users = [f"s{i}" for i in range(int(rng.integers(1, 12)))]
        auths = [f"a{i}" for i in range(int(rng.integers(1, 12)))]
        spreaders = {k: {u for u in users if rng.random() < 0.4} for k in keys}
        authors = {k: {a for a in auths if rng.random() < 0.4} for k in keys}
        n = int(rng.integers(1, 4))
        if n > len(keys):
            continue
        fast = topics_from_sets(spreaders, authors, keys, n, prefilter=True)
        slow = topics_from_sets(spreaders, authors, keys, n, prefilter=False)
        assert fast == slow


def test_topic_anti_monotonicity():
    rng = np.random.default_rng(7)
    keys = [f"k{i}" for i in range(6)]
    users = [f"s{i}" for i in range(10)]
    spreaders = {k: {u for u in users if rng.random() < 0.5} for k in keys}
    authors = {k: {u for u in users if rng.random() < 0.5} for k in keys}
    two = {t.hashtags: t for t in topics_from_sets(spreaders, authors, keys, 2)}
    three = topics_from_sets(spreaders, authors, keys, 3)
    for t in three:
        for i in range(3):
            sub = tuple(k for j, k in enumerate(t.hashtags) if j != i)
            assert sub in two
            assert t.spreaders <= two[sub].spreaders
            assert t.authors <= two[sub].authors


def test_discover_topics_end_to_end():
    # k1,k2 pushed by s1 in one burst hour each day; k3 behaves like the crowd
    cells = {}
    for d in ("d1", "d2", "d3"):
        for h in range(12):
            for k in ("k1", "k2", "k3"):
                cells[("s2", "a2", k, d, h)] = 2
        cells[("s1", "a1", "k1", d, 18)] = 30
        cells[("s1", "a1", "k2", d, 18)] = 30
    base5 = cube_from_counts(SCHEMA_HASHTAG, cells)
    topics = discover_topics(base5, ["k1", "k2", "k3"], 2)
    assert [t.hashtags for t in topics] == [("k1", "k2")]
    assert "s1" in topics[0].spreaders
    assert "a1" in topics[0].authors


def test_discover_topics_validation():
    base5 = cube_from_counts(SCHEMA_HASHTAG, {("s1", "a1", "k1", "d1", 0): 1})
    with pytest.raises(DetectError):
        discover_topics(base5, [], 1)
    with pytest.raises(DetectError):
        discover_topics(base5, ["k1"], 0)
    with pytest.raises(DetectError):
        discover_topics(base5, ["k1"], 2)


# -- link prediction -----------------------------------------------------------------

def _prediction_base():
    cells = {
        ("s1", "a1", "k1", "d1", 7): 12,
        ("s2", "a1", "k1", "d1", 7): 3,
        ("s3", "a1", "k1", "d1", 7): 15,
        ("s2", "a1", "k1", "d2", 7): 15,
        ("s3", "a1", "k1", "d3", 7): 15,
        ("s2", "a1", "k2", "d1", 7): 30,
    }
    return cube_from_counts(SCHEMA_HASHTAG, cells)


def _communities():
    return CommunityAssignment({"s1": "c1", "s2": "c1", "s3": "c2"})


def test_predict_product_of_shares():
    # community share 30/60, hour share 12/60, slot volume 30 over |D|=3
    value = predict_user_topic(_prediction_base(), _communities(),
                               "s1", ["k1"], "d1", 7)
    assert value == pytest.approx(0.5 * 0.2 * 10.0, rel=1e-12)


def test_predict_mean_day_variant():
    value = predict_user_topic(_prediction_base(), _communities(),
                               "s1", ["k1"], "d1", 7, variant="mean-day")
    assert value == pytest.approx(0.5 * 0.2 * 20.0, rel=1e-12)


def test_predict_degenerate_sole_member():
    cells = {("s9", "a1", "k1", "d1", 3): 8, ("s9", "a1", "k1", "d2", 3): 4}
    base5 = cube_from_counts(SCHEMA_HASHTAG, cells)
    communities = CommunityAssignment({"s9": "solo"})
    value = predict_user_topic(base5, communities, "s9", ["k1"], "d1", 3)
    assert value == pytest.approx(8 / 2)  # 1 * 1 * v(d1,3)/|D|


def test_predict_zero_denominator_unsupported():
    value = predict_user_topic(_prediction_base(), _communities(),
                               "s1", ["k1"], "d1", 5)
    assert value is None


def test_predict_validation():
    base5 = _prediction_base()
    with pytest.raises(DetectError, match="absent"):
        predict_user_topic(base5, _communities(), "s1", ["ghost"], "d1", 7)
    with pytest.raises(DetectError, match="community"):
        predict_user_topic(base5, _communities(), "s99", ["k1"], "d1", 7)
    with pytest.raises(DetectError, match="variant"):
        predict_user_topic(base5, _communities(), "s1", ["k1"], "d1", 7,
                           variant="wild")
    with pytest.raises(DetectError, match="hashtag"):
        predict_user_topic(base5, _communities(), "s1", [], "d1", 7)


def test_predict_topic_sums_over_hashtags():
    # K = {k1,k2}: topic volume at (d1,7) is 60, community share (30+30)/90
    value = predict_user_topic(_prediction_base(), _communities(),
                               "s1", ["k1", "k2"], "d1", 7)
    assert value == pytest.approx((60 / 90) * (12 / 60) * (60 / 3), rel=1e-12)
