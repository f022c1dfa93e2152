"""Read-only HTTP layer over the detection pipeline.

One dataset per process, loaded at startup; every endpoint is a thin
call into detect/estimator over that immutable state, so responses are
deterministic and cacheable. Caches are append-only dicts keyed by
canonical parameter tuples -- concurrent writers can only race to store
the same value. JSON bodies are rendered with sorted keys so repeating
any GET yields byte-identical bytes.

Error contract: 400 for malformed specs and parameters (including body
validation), 404 for unknown events/entities, 409 when the needed slice
of the dataset (hashtag cube, communities) was not loaded.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from fastapi import Depends, FastAPI, HTTPException, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import __version__, detect
from .cube import SCHEMA_HASHTAG, SCHEMA_TIME, Cube, CubeError, build_base_cube
from .detect import CommunityAssignment, DetectError
from .deviation import DeviationError, OutlierPolicy, detect_outliers, evaluate_context
from .estimator import (
    ConsistencyError,
    EstimatorError,
    expected_ratio_product,
    parse_estimator_text,
)
from .ingest import load_communities, parse_file
from .report import eval_payload, event_payload

_BAD_REQUEST = (DetectError, EstimatorError, CubeError, DeviationError,
                ConsistencyError)

MAX_PAGE_SIZE = 5000


class CanonicalJSON(JSONResponse):
    # sort_keys makes warm/cold cache responses byte-identical
    def render(self, content) -> bytes:
        return json.dumps(content, sort_keys=True, separators=(",", ":"),
                          allow_nan=False).encode("utf-8")


class SessionState:
    """Loaded cubes plus append-only caches of derived results."""

    def __init__(self, base: Optional[Cube], base5: Optional[Cube] = None,
                 communities: Optional[CommunityAssignment] = None) -> None:
        self.base = base
        self.base5 = base5
        self.communities = communities
        self._events = {}       # policy key -> (hour_eval, [Event])
        self._evaluations = {}  # evaluate-request key -> (payload, sorted cells)

    def events(self, policy: OutlierPolicy, survival: str):
        key = (policy.sigma_multiplier, policy.side, policy.robust, survival)
        if key not in self._events:
            self._events[key] = detect.find_events(self.base, policy, survival)
        return self._events[key]

    def evaluation(self, key, compute):
        if key not in self._evaluations:
            self._evaluations[key] = compute()
        return self._evaluations[key]


class EvaluateRequest(BaseModel):
    estimator: str
    dims: list[str] = ["day", "hour"]
    deviation: Literal["ratio", "poisson"] = "poisson"
    sigma: float = Field(3.0, gt=0)
    side: Literal["both", "positive", "negative"] = "both"
    robust: bool = False
    survival: Literal["gt", "geq"] = "gt"
    page: int = Field(1, ge=1)
    page_size: int = Field(500, ge=1, le=MAX_PAGE_SIZE)


def _policy_query(
    sigma: float = Query(3.0, gt=0),
    side: Literal["both", "positive", "negative"] = Query("both"),
    robust: bool = Query(False),
    survival: Literal["gt", "geq"] = Query("gt"),
) -> tuple[OutlierPolicy, str]:
    return OutlierPolicy(sigma_multiplier=sigma, side=side, robust=robust), survival


def create_app(base: Optional[Cube], base5: Optional[Cube] = None,
               communities: Optional[CommunityAssignment] = None) -> FastAPI:
    state = SessionState(base, base5, communities)
    app = FastAPI(title="cubelens", version=__version__,
                  default_response_class=CanonicalJSON)
    app.state.session = state

    def _error(status: int, message: str) -> CanonicalJSON:
        return CanonicalJSON({"error": message}, status_code=status)

    @app.exception_handler(RequestValidationError)
    async def _on_validation(request: Request, exc: RequestValidationError):
        detail = "; ".join(
            f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors())
        return _error(400, detail)

    @app.exception_handler(HTTPException)
    async def _on_http(request: Request, exc: HTTPException):
        return _error(exc.status_code, exc.detail)

    async def _on_domain(request: Request, exc: Exception):
        return _error(400, str(exc))

    for exc_type in _BAD_REQUEST:
        app.add_exception_handler(exc_type, _on_domain)

    def _base() -> Cube:
        if state.base is None:
            raise HTTPException(409, "dataset not loaded")
        return state.base

    def _base5() -> Cube:
        _base()
        if state.base5 is None:
            raise HTTPException(409, "no hashtag records loaded")
        return state.base5

    def _event(event_id: int, policy: OutlierPolicy, survival: str):
        _, events = state.events(policy, survival)
        if not 0 <= event_id < len(events):
            raise HTTPException(
                404, f"event {event_id} not found ({len(events)} events detected)")
        return events[event_id]

    @app.get("/schema")
    def schema():
        base = _base()
        days = base.domain("day")
        payload = {
            "version": __version__,
            "time": {
                "dims": list(base.schema.names),
                "records": base.grand_total,
                "cells": base.support_size,
                "days": [days[0], days[-1]] if days else [],
                "spreaders": len(base.domain("spreader")),
                "authors": len(base.domain("author")),
            },
            "hashtags": None,
            "communities": None,
        }
        if state.base5 is not None:
            payload["hashtags"] = {
                "dims": list(state.base5.schema.names),
                "records": state.base5.grand_total,
                "distinct": len(state.base5.domain("hashtag")),
            }
        if state.communities is not None:
            groups = set(state.communities.assignment.values())
            payload["communities"] = {
                "spreaders": len(state.communities.assignment),
                "groups": len(groups),
            }
        return payload

    @app.post("/evaluate")
    def evaluate(req: EvaluateRequest):
        base = _base()
        unknown = [d for d in req.dims if d not in base.schema.names]
        if unknown:
            raise HTTPException(400, f"unknown dimensions: {unknown}")
        if not req.dims:
            raise HTTPException(400, "dims must be non-empty")
        key = (req.estimator, tuple(req.dims), req.deviation,
               req.sigma, req.side, req.robust, req.survival)

        def compute():
            obs = base.aggregate(set(base.schema.names) - set(req.dims))
            spec = parse_estimator_text(req.estimator, obs)
            field = expected_ratio_product(obs, spec)
            policy = OutlierPolicy(sigma_multiplier=req.sigma, side=req.side,
                                   robust=req.robust)
            ev = evaluate_context(obs, field, kind=req.deviation, policy=policy,
                                  survival_mode=req.survival)
            dims = [d for d in base.schema.names if d in req.dims]
            payload = eval_payload(ev, detect_outliers(ev), dims)
            cells = [
                {"coord": list(c.coord), "observed": c.observed,
                 "expected": c.expected,
                 "deviation": None if c.deviation is None else c.deviation,
                 "flag": c.flag}
                for c in sorted(ev.cells, key=lambda c: tuple(map(str, c.coord)))
            ]
            return payload, cells

        payload, cells = state.evaluation(key, compute)
        start = (req.page - 1) * req.page_size
        return {
            **payload,
            "estimator": req.estimator,
            "page": req.page,
            "page_size": req.page_size,
            "cell_page": cells[start:start + req.page_size],
        }

    @app.get("/events")
    def events(pol: tuple = Depends(_policy_query)):
        base = _base()
        policy, survival = pol
        hour_eval, found = state.events(policy, survival)
        outliers = detect_outliers(hour_eval)
        return {
            "events": [event_payload(base, i, e) for i, e in enumerate(found)],
            "context": {"context": "multiagg",
                        **eval_payload(hour_eval, outliers, ("day", "hour"))},
        }

    @app.get("/events/{event_id}/authors")
    def event_authors(event_id: int, pol: tuple = Depends(_policy_query),
                      gap_factor: float = Query(3.0, gt=0)):
        base = _base()
        policy, survival = pol
        event = _event(event_id, policy, survival)
        ev, cause = detect.explain_event_authors(base, event, policy,
                                                 gap_factor, survival)
        return {
            "event": event_payload(base, event_id, event),
            "cause": {"kind": cause.kind,
                      "main": [[e, d, o, x] for e, d, o, x in cause.main_entities]},
            **eval_payload(ev, detect_outliers(ev), ("author",)),
        }

    @app.get("/events/{event_id}/spreaders")
    def event_spreaders(event_id: int, author: Optional[str] = Query(None),
                        pol: tuple = Depends(_policy_query),
                        gap_factor: float = Query(3.0, gt=0)):
        base = _base()
        policy, survival = pol
        event = _event(event_id, policy, survival)
        if author is None:
            _, cause = detect.explain_event_authors(base, event, policy,
                                                    gap_factor, survival)
            if cause.kind != "one-main":
                raise HTTPException(
                    404, f"event {event_id} cause is {cause.kind}; pass ?author=")
            author = cause.main_entities[0][0]
        elif author not in base.domain("author"):
            raise HTTPException(404, f"unknown author {author!r}")
        ev, regime = detect.explain_event_spreaders(base, event, author,
                                                    policy, survival)
        return {
            "event": event_payload(base, event_id, event),
            "author": author,
            "regime": {"kind": regime.kind, "group": sorted(regime.group),
                       "share": regime.share},
            **eval_payload(ev, detect_outliers(ev), ("spreader",)),
        }

    @app.get("/events/{event_id}/hashtags")
    def event_hashtags(event_id: int, pol: tuple = Depends(_policy_query)):
        base = _base()
        base5 = _base5()
        policy, survival = pol
        event = _event(event_id, policy, survival)
        ev = detect.event_hashtag_context(base5, event, policy, survival)
        outliers = detect_outliers(ev)
        return {
            "event": event_payload(base, event_id, event),
            "hashtags": [c[0] for c, _, sign in outliers.outliers if sign == "+"],
            **eval_payload(ev, outliers, ("hashtag",)),
        }

    @app.get("/topics")
    def topics(n: int = Query(2, ge=1),
               candidates: Optional[str] = Query(None, description="';'-separated"),
               pol: tuple = Depends(_policy_query)):
        base5 = _base5()
        policy, survival = pol
        if candidates is not None:
            keys = sorted({k for k in candidates.split(";") if k})
        else:
            triplets = detect.abnormal_hashtags_global(base5, policy, survival)
            keys = sorted({k for k, _, _, dev in triplets if dev > 0})
        if not keys:
            return {"n": n, "candidates": [], "topics": []}
        found = detect.discover_topics(base5, keys, n, policy,
                                       survival_mode=survival)
        return {
            "n": n,
            "candidates": keys,
            "topics": [{"hashtags": list(t.hashtags),
                        "spreaders": sorted(t.spreaders),
                        "authors": sorted(t.authors)} for t in found],
        }

    @app.get("/predict")
    def predict(s: str = Query(..., description="spreader"),
                k: list[str] = Query(..., description="topic hashtags"),
                d: str = Query(..., description="day label"),
                h: int = Query(..., ge=0, le=23),
                variant: Literal["literal", "mean-day"] = Query("literal")):
        base5 = _base5()
        if state.communities is None:
            raise HTTPException(409, "no communities loaded")
        hashtags = sorted({tag for tag in k if tag})
        value = detect.predict_user_topic(base5, state.communities, s, hashtags,
                                          d, h, variant)
        return {"spreader": s, "hashtags": hashtags, "day": d, "hour": h,
                "variant": variant, "expected": value,
                "unsupported": value is None}

    ui_dir = Path(__file__).parent / "ui"
    if ui_dir.is_dir():
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def load_app(data, communities=None, tz: float = 0.0) -> FastAPI:
    """Build the app from an interactions file (and optional communities).

    The time cube comes from a triplet-mode parse (each line once); the
    hashtag cube from a quad-mode parse of the same file, absent when no
    line carries hashtags -- its endpoints then answer 409.
    """
    base = build_base_cube(parse_file(data, "triplet", tz).records, SCHEMA_TIME)
    tagged = [r for r in parse_file(data, "quad", tz).records
              if r.hashtag is not None]
    base5 = build_base_cube(tagged, SCHEMA_HASHTAG) if tagged else None
    assignment = None
    if communities is not None:
        assignment = CommunityAssignment(load_communities(communities))
    return create_app(base, base5, assignment)
