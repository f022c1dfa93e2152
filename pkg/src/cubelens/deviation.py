r"""Deviation scoring and 3-sigma outlier extraction.

Two deviation functions compare an observed count f against an expected
value lambda:

* ratio    d_r = f / lambda                      (1 is neutral),
* Poisson  d_p = ln F_lambda(f)          if f <= lambda
           d_p = -ln(1 - F_lambda(f))    otherwise,

where F_lambda is the Poisson CDF. d_p is a signed log-probability:
strongly negative means "suspiciously low", strongly positive
"suspiciously high", and |d_p| grows with the evidence against the
Poisson model rather than with the raw count.

The CDF uses the incomplete-gamma identities

    F(k; lambda) = Q(k+1, lambda),    P(X > k) = P(k+1, lambda),

with Q and P the regularized upper/lower incomplete gamma functions.
Both are computed in log space -- the lower function by its power
series, the upper by a Lentz continued fraction -- so tail
probabilities far below double-precision underflow still give accurate
log values and the complement 1-F never suffers catastrophic
cancellation. Accuracy is ~1e-14 relative for lambda up to 1e6.

A cell whose model says "impossible" (lambda = 0, f > 0) is assigned the
sentinel CAP and flagged; capped and unsupported cells never enter the
mean/std statistics that the 3-sigma rule uses.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .cube import Cube
from .estimator import ExpectedField

# |ln| of the smallest positive double is ~744.44; CAP sits just above so it
# is recognizable and still orderable against genuine deviations.
CAP = 745.0

_EPS = 1e-16
_ITMAX = 20_000
_FPMIN = 1e-300

# Stirling series coefficients B_2n / (2n (2n-1)) for ln Gamma.
_STIRLING = (
    1.0 / 12.0, -1.0 / 360.0, 1.0 / 1260.0, -1.0 / 1680.0,
    1.0 / 1188.0, -691.0 / 360360.0, 1.0 / 156.0,
)
_HALF_LN_2PI = 0.5 * np.log(2.0 * np.pi * np.longdouble(1.0))


class DeviationError(ValueError):
    """Bad arguments to a deviation function."""


def _lgamma_extended(a: int) -> np.longdouble:
    """ln Gamma(a) for integer a >= 1, in extended precision.

    Double-precision lgamma carries ~1 ulp of its value; near a = 1e6 that
    is ~2e-9 absolute, which would dominate the log-CDF error budget. Small
    arguments sum exact logs of integers; large ones use Stirling, whose
    truncation error at a >= 32 sits far below extended-precision epsilon.
    """
    if a < 32:
        return np.sum(np.log(np.arange(1, a, dtype=np.longdouble))) if a > 1 \
            else np.longdouble(0.0)
    x = np.longdouble(a)
    inv = 1.0 / x
    inv2 = inv * inv
    tail = np.longdouble(0.0)
    power = inv
    for coeff in _STIRLING:
        tail += coeff * power
        power *= inv2
    return (x - 0.5) * np.log(x) - x + _HALF_LN_2PI + tail


def _log_prefactor(a: int, x: float) -> np.longdouble:
    """ln( e^-x x^a / Gamma(a) ) without double-precision cancellation.

    The three addends grow like x ln x while the result stays O(ln x), so
    they are combined in extended precision before any rounding to double.
    """
    xl = np.longdouble(x)
    return np.longdouble(a) * np.log(xl) - xl - _lgamma_extended(a)


def _log_lower_series(a: int, x: float) -> float:
    """ln P(a, x) by the standard series; converges for x < a + 1."""
    ap = float(a)
    total = 1.0 / a
    term = total
    for _ in range(_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return float(_log_prefactor(a, x) + np.log(np.longdouble(total)))
    raise DeviationError(f"lower incomplete gamma series failed to converge (a={a}, x={x})")


def _log_upper_cf(a: int, x: float) -> float:
    """ln Q(a, x) by a modified Lentz continued fraction; for x >= a + 1."""
    b = x + 1.0 - a
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _ITMAX + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = b + an / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            if h <= 0:
                raise DeviationError(f"continued fraction left the domain (a={a}, x={x})")
            return float(_log_prefactor(a, x) + np.log(np.longdouble(h)))
    raise DeviationError(f"upper incomplete gamma fraction failed to converge (a={a}, x={x})")


def _log1mexp(lx: float) -> float:
    """ln(1 - e^lx) for lx <= 0, stable on both ends."""
    if lx >= 0.0:
        return float("-inf")
    if lx > -math.log(2.0):
        return math.log(-math.expm1(lx))
    return math.log1p(-math.exp(lx))


def _check_k_lam(k, lam) -> tuple[int, float]:
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)):
        raise DeviationError(f"count must be an integer, got {k!r}")
    if k < 0:
        raise DeviationError(f"count must be >= 0, got {k}")
    lam = float(lam)
    if not math.isfinite(lam) or lam < 0:
        raise DeviationError(f"lambda must be finite and >= 0, got {lam}")
    return int(k), lam


def log_poisson_cdf(k, lam) -> float:
    """ln P(X <= k) for X ~ Poisson(lam)."""
    k, lam = _check_k_lam(k, lam)
    if lam == 0.0:
        return 0.0
    if k == 0:
        return -lam  # F(0) = e^-lambda, exact
    if lam < k + 2.0:
        return _log1mexp(_log_lower_series(k + 1, lam))
    return _log_upper_cf(k + 1, lam)


def log_poisson_sf(k, lam) -> float:
    """ln P(X > k) for X ~ Poisson(lam)."""
    k, lam = _check_k_lam(k, lam)
    if lam == 0.0:
        return float("-inf")
    if k == 0:
        return _log1mexp(-lam)
    if lam < k + 2.0:
        return _log_lower_series(k + 1, lam)
    return _log1mexp(_log_upper_cf(k + 1, lam))


def poisson_cdf(k, lam) -> float:
    """P(X <= k) for X ~ Poisson(lam)."""
    return math.exp(log_poisson_cdf(k, lam))


def deviation_ratio(observed, expected) -> float | None:
    """f / f_exp; (0, 0) is neutral 1.0; f > 0 with f_exp = 0 is unsupported (None)."""
    expected = float(expected)
    if expected < 0 or not math.isfinite(expected):
        raise DeviationError(f"expected must be finite and >= 0, got {expected}")
    if expected == 0.0:
        return 1.0 if observed == 0 else None
    return observed / expected


def deviation_poisson(observed, expected, survival_mode: str = "gt") -> float:
    """Signed log-probability deviation under Poisson(expected).

    survival_mode "gt" uses the literal complement P(X > f) on the upper
    branch; "geq" uses P(X >= f) instead.
    """
    if survival_mode not in ("gt", "geq"):
        raise DeviationError(f"survival_mode must be 'gt' or 'geq', got {survival_mode!r}")
    expected = float(expected)
    if expected == 0.0:
        return 0.0 if observed == 0 else CAP
    if observed <= expected:
        return log_poisson_cdf(observed, expected)
    upper_k = observed - 1 if survival_mode == "geq" else observed
    return -log_poisson_sf(upper_k, expected)


@dataclass(frozen=True)
class OutlierPolicy:
    sigma_multiplier: float = 3.0
    side: str = "both"
    robust: bool = False  # median/MAD in place of mean/std

    def __post_init__(self) -> None:
        if self.sigma_multiplier <= 0:
            raise DeviationError("sigma_multiplier must be > 0")
        if self.side not in ("both", "positive", "negative"):
            raise DeviationError(f"side must be both|positive|negative, got {self.side!r}")


@dataclass(frozen=True)
class CellEval:
    coord: tuple
    observed: int
    expected: float
    deviation: float | None
    flag: str = ""  # "" | "capped" | "unsupported"


@dataclass(frozen=True)
class ContextEvaluation:
    """Observed/expected/deviation triple per cell plus dispersion stats."""

    cells: tuple[CellEval, ...]
    kind: str                      # ratio | poisson
    policy: OutlierPolicy
    mean: float
    std: float

    def finite(self) -> list[CellEval]:
        return [c for c in self.cells if c.flag == ""]


def evaluate_context(obs: Cube, expected: ExpectedField, kind: str = "poisson",
                     policy: OutlierPolicy = OutlierPolicy(),
                     survival_mode: str = "gt") -> ContextEvaluation:
    """Score every enumerated cell of an expected field against the cube."""
    if kind not in ("ratio", "poisson"):
        raise DeviationError(f"deviation kind must be ratio|poisson, got {kind!r}")
    cells = []
    for coord in sorted(expected.values):
        obs_count = obs.cell_value(coord)
        exp_value = expected.values[coord]
        if coord in expected.unsupported:
            cells.append(CellEval(coord, obs_count, exp_value, None, "unsupported"))
            continue
        if kind == "ratio":
            d = deviation_ratio(obs_count, exp_value)
            if d is None:
                cells.append(CellEval(coord, obs_count, exp_value, None, "unsupported"))
            else:
                cells.append(CellEval(coord, obs_count, exp_value, d))
        else:
            if exp_value == 0.0 and obs_count > 0:
                cells.append(CellEval(coord, obs_count, exp_value, CAP, "capped"))
            else:
                d = deviation_poisson(obs_count, exp_value, survival_mode)
                cells.append(CellEval(coord, obs_count, exp_value, d))
    finite = np.array([c.deviation for c in cells if c.flag == ""], dtype=float)
    mean = float(np.mean(finite)) if finite.size else float("nan")
    std = float(np.std(finite)) if finite.size else float("nan")
    return ContextEvaluation(tuple(cells), kind, policy, mean, std)


@dataclass(frozen=True)
class OutlierSet:
    outliers: tuple[tuple, ...]        # (coord, deviation, sign), deviation descending
    capped: tuple[tuple, ...]          # (coord, observed) with deviation CAP
    unsupported: tuple[tuple, ...]     # coords the model has no opinion on
    center: float
    scale: float

    @property
    def positive(self) -> tuple[tuple, ...]:
        return tuple(o for o in self.outliers if o[2] == "+")

    @property
    def coords(self) -> tuple[tuple, ...]:
        return tuple(o[0] for o in self.outliers)


def detect_outliers(ev: ContextEvaluation) -> OutlierSet:
    """|d - center| > multiplier * scale over finite deviations only."""
    finite = ev.finite()
    capped = tuple((c.coord, c.observed) for c in ev.cells if c.flag == "capped")
    unsupported = tuple(c.coord for c in ev.cells if c.flag == "unsupported")
    if len(finite) < 2:
        warnings.warn("fewer than 2 finite deviations; outlier statistics undefined")
        return OutlierSet((), capped, unsupported, float("nan"), float("nan"))
    values = np.array([c.deviation for c in finite], dtype=float)
    if ev.policy.robust:
        center = float(np.median(values))
        scale = 1.4826 * float(np.median(np.abs(values - center)))
    else:
        center = ev.mean
        scale = ev.std
    if scale == 0.0:
        warnings.warn("zero dispersion in deviations; no outliers reported")
        return OutlierSet((), capped, unsupported, center, scale)
    threshold = ev.policy.sigma_multiplier * scale
    picked = []
    for c in finite:
        gap = c.deviation - center
        if abs(gap) <= threshold:
            continue
        sign = "+" if gap > 0 else "-"
        if ev.policy.side == "positive" and sign != "+":
            continue
        if ev.policy.side == "negative" and sign != "-":
            continue
        picked.append((c.coord, c.deviation, sign))
    picked.sort(key=lambda o: (-o[1], o[0]))
    return OutlierSet(tuple(picked), capped, unsupported, center, scale)


def histogram(ev: ContextEvaluation, bin_width: float | None = None, bins: int = 50) -> dict:
    """Binned finite deviations, JSON-friendly: {"edges": [...], "counts": [...]}."""
    values = np.array([c.deviation for c in ev.finite()], dtype=float)
    if values.size == 0:
        return {"edges": [], "counts": []}
    if bin_width is not None:
        if bin_width <= 0:
            raise DeviationError("bin_width must be > 0")
        lo = math.floor(values.min() / bin_width) * bin_width
        hi = math.ceil(values.max() / bin_width) * bin_width
        nbins = max(1, round((hi - lo) / bin_width))
        edges = lo + bin_width * np.arange(nbins + 1)
    else:
        edges = bins
    counts, edges = np.histogram(values, bins=edges)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def to_json_lines(ev: ContextEvaluation, outliers: OutlierSet | None = None) -> Iterator[str]:
    """One JSON object per cell: coord, observed, expected, deviation, outlier, sign."""
    if outliers is None:
        outliers = detect_outliers(ev)
    flagged = {o[0]: o[2] for o in outliers.outliers}
    for c in ev.cells:
        yield json.dumps({
            "coord": list(c.coord),
            "observed": c.observed,
            "expected": c.expected,
            "deviation": c.deviation,
            "flag": c.flag,
            "outlier": c.coord in flagged,
            "sign": flagged.get(c.coord, ""),
        }, sort_keys=True, separators=(",", ":"))
