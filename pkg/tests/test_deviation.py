"""Ratio/Poisson deviations, the log-space CDF, and 3-sigma extraction."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cubelens.cube import Dimension, DimensionSchema
from cubelens.deviation import (
    CAP,
    CellEval,
    ContextEvaluation,
    DeviationError,
    OutlierPolicy,
    detect_outliers,
    deviation_poisson,
    deviation_ratio,
    evaluate_context,
    histogram,
    log_poisson_cdf,
    log_poisson_sf,
    poisson_cdf,
)
from cubelens.estimator import ExpectedField, expected_basic
from conftest import cube_from_counts

X_ = DimensionSchema((Dimension("x"),))


def _direct_cdf(k: int, lam: float) -> float:
    total, term = 0.0, math.exp(-lam)
    for i in range(k + 1):
        if i > 0:
            term *= lam / i
        total += term
    return total


def make_eval(deviations, observed=None, kind="ratio",
              policy=OutlierPolicy()) -> ContextEvaluation:
    observed = observed or [int(max(d, 0)) for d in deviations]
    cells = tuple(
        CellEval((f"c{i}",), observed[i], 1.0, float(d))
        for i, d in enumerate(deviations))
    arr = np.array(deviations, dtype=float)
    return ContextEvaluation(cells, kind, policy, float(arr.mean()), float(arr.std()))


# -- ratio ---------------------------------------------------------------------

def test_ratio_magnitude_blind():
    assert deviation_ratio(2, 1) == deviation_ratio(2000, 1000) == 2.0


def test_ratio_neutral_and_zero():
    assert deviation_ratio(7, 7) == 1.0
    assert deviation_ratio(0, 5) == 0.0
    assert deviation_ratio(0, 0) == 1.0


def test_ratio_unsupported():
    assert deviation_ratio(3, 0) is None


@given(st.integers(0, 10**6), st.floats(0.01, 1e6), st.floats(0.01, 1e3))
def test_ratio_scale_invariant(f, f_exp, c):
    assert deviation_ratio(c * f, c * f_exp) == pytest.approx(
        deviation_ratio(f, f_exp), rel=1e-9)


# -- poisson cdf -----------------------------------------------------------------

def test_cdf_anchors():
    assert poisson_cdf(0, 2.0) == pytest.approx(math.exp(-2), abs=1e-12)
    assert poisson_cdf(5, 1.0) == pytest.approx(0.9994058, abs=1e-7)
    for k in (0, 3, 100):
        assert poisson_cdf(k, 0.0) == 1.0


def test_cdf_rejects_negative_lambda():
    with pytest.raises(DeviationError):
        poisson_cdf(1, -0.5)
    with pytest.raises(DeviationError):
        poisson_cdf(-1, 1.0)


@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0, 100.0])
def test_cdf_matches_direct_summation(lam):
    for k in range(0, 501, 7):
        assert poisson_cdf(k, lam) == pytest.approx(_direct_cdf(k, lam), abs=1e-9)


@given(st.integers(0, 2000), st.floats(1e-3, 1e6))
def test_cdf_matches_scipy(k, lam):
    ours = log_poisson_cdf(k, lam)
    ref = stats.poisson.logcdf(k, lam)
    if math.isinf(ref):  # scipy underflows deep in the left tail; we stay finite
        assert ours < -700
    else:
        assert ours == pytest.approx(ref, rel=1e-9, abs=1e-11)


@given(st.integers(0, 2000), st.floats(1e-3, 1e6))
def test_sf_matches_scipy(k, lam):
    ours = log_poisson_sf(k, lam)
    ref = stats.poisson.logsf(k, lam)
    if math.isinf(ref):
        assert ours < -700
    else:
        assert ours == pytest.approx(ref, rel=1e-9, abs=1e-11)


def test_extreme_tail_no_cancellation():
    # F -> 1 regime where even scipy.logsf underflows to -inf: compare
    # against a direct series for P(X > k) carried in log space
    k, lam = 2000, 100.0
    log_first = -lam + (k + 1) * math.log(lam) - math.lgamma(k + 2)
    rel, term, i = 1.0, 1.0, k + 2
    while term > 1e-18 * rel:
        term *= lam / i
        rel += term
        i += 1
    oracle = log_first + math.log(rel)
    val = log_poisson_sf(k, lam)
    assert val == pytest.approx(oracle, rel=1e-12)
    assert val < -708  # past double underflow; naive 1-F would return -inf
    assert math.isinf(stats.poisson.logsf(k, lam))


# -- poisson deviation --------------------------------------------------------------

def test_deviation_anchors():
    assert deviation_poisson(0, 2.0) == pytest.approx(-2.0, abs=1e-12)
    assert deviation_poisson(5, 1.0) == pytest.approx(7.428, abs=1e-3)
    assert deviation_poisson(3, 3.0) == pytest.approx(-0.435, abs=1e-3)


def test_deviation_zero_expected():
    assert deviation_poisson(0, 0.0) == 0.0
    assert deviation_poisson(5, 0.0) == CAP


def test_deviation_survival_modes():
    lam, f = 2.0, 7
    gt = deviation_poisson(f, lam)  # -ln P(X > f)
    geq = deviation_poisson(f, lam, survival_mode="geq")  # -ln P(X >= f)
    assert gt == pytest.approx(-float(stats.poisson.logsf(f, lam)), rel=1e-9)
    assert geq == pytest.approx(-float(stats.poisson.logsf(f - 1, lam)), rel=1e-9)
    assert geq < gt  # P(X >= f) > P(X > f) -> smaller magnitude


@given(st.integers(0, 500), st.floats(0.01, 500.0))
def test_deviation_sign_law(f, lam):
    d = deviation_poisson(f, lam)
    if f <= lam:
        assert d <= 0
    else:
        assert d > 0


@given(st.floats(0.1, 200.0), st.integers(0, 300))
def test_deviation_monotone_in_observation(lam, f):
    assert deviation_poisson(f + 1, lam) >= deviation_poisson(f, lam)


# -- outlier extraction ---------------------------------------------------------------

def test_single_spike_flagged():
    ev = make_eval([0.0] * 20 + [5.0])
    out = detect_outliers(ev)
    assert [o[0] for o in out.outliers] == [("c20",)]
    assert out.outliers[0][2] == "+"
    assert out.center == pytest.approx(5.0 / 21)
    assert out.scale == pytest.approx(1.0648, abs=1e-3)


def test_constant_deviations_warn_no_outliers():
    ev = make_eval([2.0] * 10)
    with pytest.warns(UserWarning, match="zero dispersion"):
        out = detect_outliers(ev)
    assert out.outliers == ()


def test_fewer_than_two_finite_warns():
    ev = make_eval([1.0])
    with pytest.warns(UserWarning, match="fewer than 2"):
        out = detect_outliers(ev)
    assert out.outliers == ()
    assert math.isnan(out.center)


def test_capped_and_unsupported_excluded_from_stats():
    obs = cube_from_counts(X_, {("a",): 3, ("b",): 4, ("c",): 5})
    field = ExpectedField(obs, {("a",): 3.0, ("b",): 3.0, ("c",): 0.0},
                          frozenset(), "explicit domain")
    ev = evaluate_context(obs, field, kind="poisson")
    flags = {c.coord: c.flag for c in ev.cells}
    assert flags[("c",)] == "capped"
    out = detect_outliers(ev)
    assert out.capped == ((("c",), 5),)
    finite = [c.deviation for c in ev.finite()]
    assert len(finite) == 2
    assert ev.mean == pytest.approx(np.mean(finite))


def test_unsupported_ratio_cells_reported():
    obs = cube_from_counts(X_, {("a",): 2, ("b",): 3, ("c",): 2})
    field = ExpectedField(obs, {("a",): 2.0, ("b",): 2.0, ("c",): 0.0},
                          frozenset({("c",)}), "explicit domain")
    ev = evaluate_context(obs, field, kind="ratio")
    out = detect_outliers(ev)
    assert out.unsupported == (("c",),)


def test_sides():
    vals = [0.0] * 30 + [8.0, -8.0]
    both = detect_outliers(make_eval(vals))
    assert {o[2] for o in both.outliers} == {"+", "-"}
    pos = detect_outliers(make_eval(vals, policy=OutlierPolicy(side="positive")))
    assert {o[2] for o in pos.outliers} == {"+"}
    neg = detect_outliers(make_eval(vals, policy=OutlierPolicy(side="negative")))
    assert {o[2] for o in neg.outliers} == {"-"}


def test_robust_mode_resists_inflation():
    # one huge value inflates sigma enough to hide a second spike at 3 sigma;
    # median/MAD keeps flagging both
    vals = [0.1, -0.2, 0.3, -0.1, 0.2, 0.0, 0.15, -0.15, 0.25, -0.25, 0.05,
            -0.05, 10.0, 300.0]
    classic = detect_outliers(make_eval(vals))
    robust = detect_outliers(make_eval(vals, policy=OutlierPolicy(robust=True)))
    assert [o[0] for o in classic.outliers] == [("c13",)]
    assert {o[0] for o in robust.outliers} >= {("c12",), ("c13",)}


@pytest.mark.filterwarnings("ignore::UserWarning")
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40),
       st.floats(1.0, 6.0))
def test_raising_multiplier_never_adds_outliers(vals, extra):
    lo = detect_outliers(make_eval(vals, policy=OutlierPolicy(sigma_multiplier=3.0)))
    hi = detect_outliers(make_eval(vals, policy=OutlierPolicy(sigma_multiplier=3.0 + extra)))
    assert set(hi.coords) <= set(lo.coords)


@pytest.mark.filterwarnings("ignore::UserWarning")
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=30), st.randoms())
def test_outliers_invariant_under_permutation(vals, rnd):
    base = detect_outliers(make_eval(vals))
    shuffled = list(enumerate(vals))
    rnd.shuffle(shuffled)
    cells = tuple(CellEval((f"c{i}",), int(max(v, 0)), 1.0, float(v))
                  for i, v in shuffled)
    arr = np.array([v for _, v in shuffled], dtype=float)
    ev = ContextEvaluation(cells, "ratio", OutlierPolicy(),
                           float(arr.mean()), float(arr.std()))
    assert set(detect_outliers(ev).coords) == set(base.coords)


def test_policy_validation():
    with pytest.raises(DeviationError):
        OutlierPolicy(sigma_multiplier=0.0)
    with pytest.raises(DeviationError):
        OutlierPolicy(side="sideways")


def test_evaluate_context_rejects_unknown_kind():
    obs = cube_from_counts(X_, {("a",): 1, ("b",): 2})
    field = expected_basic(obs)
    with pytest.raises(DeviationError):
        evaluate_context(obs, field, kind="cauchy")


def test_histogram_counts_cells():
    ev = make_eval([0.0, 1.0, 2.0, 3.0, 4.0])
    hist = histogram(ev, bins=4)
    assert sum(hist["counts"]) == 5
    assert len(hist["edges"]) == len(hist["counts"]) + 1
