"""Command-line workflow: ingest, score, detect events, explain, serve.

Subcommands mirror the analysis loop: `hours` scores (day, hour) cells
under a chosen context, `events` groups the abnormal ones, `explain`
drills an event into authors and (for a one-main cause) spreaders,
`hashtags`/`topics`/`predict` run the hashtag-cube analyses, `synth`
writes planted fixtures and `serve` starts the HTTP layer.

Reports: stdout carries the deterministic payload (JSON by default,
aligned tables with --format table); diagnostics go to stderr; --report
DIR additionally renders figures and CSV dumps into DIR. Exit codes:
0 success, 1 usage error, 2 data error.

The 4-dim cube is always built from a triplet-mode parse so each
interaction counts once; quad mode only feeds the hashtag cube, where
one line with m hashtags legitimately becomes m cells.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__, detect, report, synth
from .report import eval_payload, event_payload
from .cube import SCHEMA_HASHTAG, SCHEMA_TIME, Cube, CubeError, build_base_cube
from .detect import CommunityAssignment, DetectError
from .deviation import (
    DeviationError,
    OutlierPolicy,
    detect_outliers,
    evaluate_context,
)
from .estimator import (
    ConsistencyError,
    EstimatorError,
    expected_ratio_product,
    parse_estimator_text,
)
from .ingest import IngestError, load_communities, parse_file

_DATA_ERRORS = (IngestError, CubeError, DetectError, EstimatorError,
                DeviationError, ConsistencyError, synth.SynthError, OSError)

CONTEXTS = ("basic", "aggregative", "multiagg")


class UsageError(Exception):
    """Flag combinations argparse cannot see; exits 1 like other usage errors."""


@dataclass(frozen=True)
class RunConfig:
    """Resolved evaluation flags shared by the scoring commands."""

    data: Path
    fmt: str
    tz: float
    context: str | None  # preset name, exclusive with estimator text
    estimator: str | None
    deviation: str | None  # None = context default
    policy: OutlierPolicy
    survival: str
    output: str
    report_dir: Path | None


class _Parser(argparse.ArgumentParser):
    # Spec'd exit codes: argparse's default usage-error status is 2,
    # which is reserved for data errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _table(header: list[str], rows: list[list]) -> str:
    cols = [[str(v) for v in col] for col in zip(header, *rows)] if rows else [[h] for h in header]
    widths = [max(len(v) for v in col) for col in cols]
    def fmt(row):
        return "  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines)


def _emit(payload: dict, output: str, table: tuple[list, list] | None = None) -> None:
    if output == "table" and table is not None:
        print(_table(*table))
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))


def _policy(args) -> OutlierPolicy:
    return OutlierPolicy(sigma_multiplier=args.sigma, side=args.side, robust=args.robust)


def _run_config(args) -> RunConfig:
    context, estimator = getattr(args, "context", None), getattr(args, "estimator", None)
    if context and estimator:
        raise UsageError("--context and --estimator are mutually exclusive")
    if not estimator and not context:
        context = "multiagg"
    return RunConfig(
        data=Path(args.data), fmt=args.format_in, tz=args.tz,
        context=context, estimator=estimator,
        deviation=getattr(args, "deviation", None),
        policy=_policy(args), survival=args.survival,
        output=args.format, report_dir=Path(args.report) if args.report else None,
    )


def _parse_with_note(path, fmt, tz):
    parsed = parse_file(path, fmt, tz)
    if parsed.errors:
        print(f"{len(parsed.errors)} malformed lines skipped "
              f"(first: line {parsed.errors[0][0]}: {parsed.errors[0][1]})",
              file=sys.stderr)
    return parsed


def _load_time_cube(cfg: RunConfig) -> Cube:
    records = _parse_with_note(cfg.data, "triplet", cfg.tz).records
    return build_base_cube(records, SCHEMA_TIME)


def _load_hashtag_cube(cfg: RunConfig) -> Cube:
    records = [r for r in _parse_with_note(cfg.data, "quad", cfg.tz).records
               if r.hashtag is not None]
    if not records:
        raise DetectError("no hashtag records in input (is this a quad-format file?)")
    return build_base_cube(records, SCHEMA_HASHTAG)


def _hour_evaluation(base: Cube, cfg: RunConfig):
    if cfg.estimator:
        dh = base.aggregate({"spreader", "author"})
        spec = parse_estimator_text(cfg.estimator, dh)
        field = expected_ratio_product(dh, spec)
        ev = evaluate_context(dh, field, kind=cfg.deviation or "poisson",
                              policy=cfg.policy, survival_mode=cfg.survival)
        name = "custom"
    else:
        ev = detect.hour_context(base, cfg.context, cfg.deviation,
                                 cfg.policy, cfg.survival)
        name = cfg.context
    return ev, name


# -- subcommands -------------------------------------------------------------

def _cmd_ingest(args) -> int:
    parsed = parse_file(args.data, args.format_in, args.tz)
    for lineno, msg in parsed.errors[:20]:
        print(f"line {lineno}: {msg}", file=sys.stderr)
    records = parsed.records
    days = sorted({r.day for r in records})
    payload = {
        "records": len(records),
        "errors": len(parsed.errors),
        "spreaders": len({r.spreader for r in records}),
        "authors": len({r.author for r in records}),
        "hashtags": len({r.hashtag for r in records if r.hashtag is not None}),
        "tagged": sum(1 for r in records if r.hashtag is not None),
        "days": [days[0], days[-1]] if days else [],
    }
    _emit(payload, args.format,
          (["field", "value"], [[k, v] for k, v in sorted(payload.items())]))
    return 0


def _cmd_hours(args) -> int:
    cfg = _run_config(args)
    base = _load_time_cube(cfg)
    ev, name = _hour_evaluation(base, cfg)
    outliers = detect_outliers(ev)
    payload = {"context": name, **eval_payload(ev, outliers, ("day", "hour"))}
    rows = [[*o["coord"], o["observed"], round(o["expected"], 3),
             round(o["deviation"], 3), o["sign"]] for o in payload["outliers"]]
    _emit(payload, cfg.output,
          (["day", "hour", "observed", "expected", "deviation", "sign"], rows))
    if cfg.report_dir:
        report.write_report(cfg.report_dir, ev, outliers, ("day", "hour"),
                            f"hour context: {name}")
    return 0


def _cmd_events(args) -> int:
    cfg = _run_config(args)
    base = _load_time_cube(cfg)
    ev, events = detect.find_events(base, cfg.policy, cfg.survival)
    outliers = detect_outliers(ev)
    payload = {
        "events": [event_payload(base, i, e) for i, e in enumerate(events)],
        "context": {"context": "multiagg", **eval_payload(ev, outliers, ("day", "hour"))},
    }
    rows = [[e["id"], e["label"], len(e["hours"]), e["total"]] for e in payload["events"]]
    _emit(payload, cfg.output, (["id", "event", "hours", "total"], rows))
    if cfg.report_dir:
        report.write_report(cfg.report_dir, ev, outliers, ("day", "hour"),
                            "event detection (multiagg)", events=events)
    return 0


def _cmd_explain(args) -> int:
    cfg = _run_config(args)
    base = _load_time_cube(cfg)
    _, events = detect.find_events(base, cfg.policy, cfg.survival)
    if not 0 <= args.event < len(events):
        raise DetectError(f"event {args.event} not found ({len(events)} events detected)")
    event = events[args.event]
    author_ev, cause = detect.explain_event_authors(
        base, event, cfg.policy, args.gap_factor, cfg.survival)
    author_out = detect_outliers(author_ev)
    payload = {
        "event": event_payload(base, args.event, event),
        "authors": {
            "cause": {"kind": cause.kind,
                      "main": [[e, d, o, x] for e, d, o, x in cause.main_entities]},
            **eval_payload(author_ev, author_out, ("author",)),
        },
        "spreaders": None,
    }
    drill = args.author
    if drill is None and cause.kind == "one-main":
        drill = cause.main_entities[0][0]
    if drill is not None:
        spreader_ev, regime = detect.explain_event_spreaders(
            base, event, drill, cfg.policy, cfg.survival)
        spreader_out = detect_outliers(spreader_ev)
        payload["spreaders"] = {
            "author": drill,
            "regime": {"kind": regime.kind, "group": list(regime.group),
                       "share": regime.share},
            **eval_payload(spreader_ev, spreader_out, ("spreader",)),
        }
    rows = [[e, round(d, 3), o, round(x, 3)] for e, d, o, x in cause.main_entities]
    _emit(payload, cfg.output,
          (["main author", "deviation", "observed", "expected"], rows))
    if cfg.report_dir:
        report.write_report(Path(cfg.report_dir) / "authors", author_ev, author_out,
                            ("author",), f"authors of {event.label()} [{cause.kind}]")
        if payload["spreaders"] is not None:
            report.write_report(Path(cfg.report_dir) / "spreaders", spreader_ev,
                                spreader_out, ("spreader",),
                                f"spreaders of {drill} in {event.label()}"
                                f" [{payload['spreaders']['regime']['kind']}]")
    return 0


def _cmd_hashtags(args) -> int:
    cfg = _run_config(args)
    base5 = _load_hashtag_cube(cfg)
    if args.event is None:
        triplets = detect.abnormal_hashtags_global(base5, cfg.policy, cfg.survival)
        payload = {"scope": "global",
                   "triplets": [{"hashtag": k, "day": d, "hour": h, "deviation": dev}
                                for k, d, h, dev in triplets]}
        rows = [[k, d, h, round(dev, 3)] for k, d, h, dev in triplets]
        _emit(payload, cfg.output, (["hashtag", "day", "hour", "deviation"], rows))
        if cfg.report_dir:
            ev = detect.hashtag_context(base5, cfg.policy, cfg.survival)
            report.write_report(cfg.report_dir, ev, detect_outliers(ev),
                                ("hashtag", "day", "hour"), "hashtag-day-hour context")
        return 0
    base = _load_time_cube(cfg)
    _, events = detect.find_events(base, cfg.policy, cfg.survival)
    if not 0 <= args.event < len(events):
        raise DetectError(f"event {args.event} not found ({len(events)} events detected)")
    event = events[args.event]
    ev = detect.event_hashtag_context(base5, event, cfg.policy, cfg.survival)
    outliers = detect_outliers(ev)
    abnormal = [coord[0] for coord, _, sign in outliers.outliers if sign == "+"]
    payload = {"scope": "event", "event": event_payload(base, args.event, event),
               "hashtags": abnormal, **eval_payload(ev, outliers, ("hashtag",))}
    _emit(payload, cfg.output, (["hashtag"], [[k] for k in abnormal]))
    if cfg.report_dir:
        report.write_report(cfg.report_dir, ev, outliers, ("hashtag",),
                            f"hashtags of {event.label()}")
    return 0


def _cmd_topics(args) -> int:
    cfg = _run_config(args)
    base5 = _load_hashtag_cube(cfg)
    if args.candidates:
        candidates = sorted({k for k in args.candidates.split(";") if k})
    else:
        triplets = detect.abnormal_hashtags_global(base5, cfg.policy, cfg.survival)
        candidates = sorted({k for k, _, _, dev in triplets if dev > 0})
    if not candidates:
        payload = {"n": args.n, "candidates": [], "topics": []}
        _emit(payload, cfg.output, (["hashtags", "spreaders", "authors"], []))
        return 0
    topics = detect.discover_topics(base5, candidates, args.n, cfg.policy,
                                    survival_mode=cfg.survival)
    payload = {
        "n": args.n,
        "candidates": candidates,
        "topics": [{"hashtags": list(t.hashtags), "spreaders": sorted(t.spreaders),
                    "authors": sorted(t.authors)} for t in topics],
    }
    rows = [[";".join(t.hashtags), len(t.spreaders), len(t.authors)] for t in topics]
    _emit(payload, cfg.output, (["hashtags", "spreaders", "authors"], rows))
    return 0


def _cmd_predict(args) -> int:
    cfg = _run_config(args)
    base5 = _load_hashtag_cube(cfg)
    communities = CommunityAssignment(load_communities(args.communities))
    hashtags = sorted({k for k in args.hashtags.split(";") if k})
    value = detect.predict_user_topic(base5, communities, args.spreader, hashtags,
                                      args.day, args.hour, args.variant)
    payload = {"spreader": args.spreader, "hashtags": hashtags, "day": args.day,
               "hour": args.hour, "variant": args.variant,
               "expected": value, "unsupported": value is None}
    _emit(payload, cfg.output,
          (["spreader", "topic", "expected"],
           [[args.spreader, ";".join(hashtags), value]]))
    return 0


def _cmd_synth(args) -> int:
    spec = synth.preset(args.preset, args.seed)
    manifest = synth.write_scenario(spec, args.out)
    if args.communities:
        lines = [f"user-{i},community-{i % args.communities}\n"
                 for i in range(spec.users)]
        (Path(args.out) / "communities.csv").write_text("".join(lines), encoding="utf-8")
    payload = {"out": str(args.out), "preset": args.preset, "seed": args.seed,
               "records": manifest["records"], "plants": len(manifest["plants"])}
    _emit(payload, args.format, (["field", "value"], sorted(payload.items())))
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import load_app

    app = load_app(args.data, communities=args.communities, tz=args.tz)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- argument wiring ---------------------------------------------------------

def _add_common(p: _Parser, data: bool = True) -> None:
    if data:
        p.add_argument("data", help="interactions.csv[.gz] path")
        p.add_argument("--format-in", choices=("triplet", "quad"), default="triplet",
                       help="input line format (default triplet)")
        p.add_argument("--tz", type=float, default=0.0,
                       help="hour-binning offset from UTC in hours")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--sigma", type=float, default=3.0, help="outlier threshold multiplier")
    p.add_argument("--side", choices=("both", "positive", "negative"), default="both")
    p.add_argument("--robust", action="store_true", help="median/MAD instead of mean/std")
    p.add_argument("--survival", choices=("gt", "geq"), default="gt",
                   help="upper-tail convention for the Poisson deviation")
    p.add_argument("--report", default=None, metavar="DIR",
                   help="also render figures and CSV dumps into DIR")


def build_parser() -> _Parser:
    parser = _Parser(prog="cubelens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"cubelens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse a log and report its shape")
    p.add_argument("data")
    p.add_argument("--format-in", choices=("triplet", "quad"), default="quad")
    p.add_argument("--tz", type=float, default=0.0)
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("hours", help="score (day, hour) cells under a context")
    _add_common(p)
    p.add_argument("--context", choices=CONTEXTS, default=None)
    p.add_argument("--estimator", default=None, metavar="TEXT",
                   help="estimator text, e.g. 'expect = cube(day)*cube(hour)/cube()'")
    p.add_argument("--deviation", choices=("ratio", "poisson"), default=None,
                   help="default: ratio for basic, poisson otherwise")
    p.set_defaults(fn=_cmd_hours)

    p = sub.add_parser("events", help="detect maximal runs of abnormal hours")
    _add_common(p)
    p.set_defaults(fn=_cmd_events)

    p = sub.add_parser("explain", help="drill an event into authors and spreaders")
    _add_common(p)
    p.add_argument("--event", type=int, required=True, help="event id from `events`")
    p.add_argument("--author", default=None,
                   help="drill spreaders of this author (default: the one-main author)")
    p.add_argument("--gap-factor", type=float, default=3.0)
    p.set_defaults(fn=_cmd_explain)

    p = sub.add_parser("hashtags", help="abnormal hashtags, global or per event")
    _add_common(p)
    p.add_argument("--event", type=int, default=None,
                   help="restrict to this event's scope")
    p.set_defaults(fn=_cmd_hashtags, format_in="quad")

    p = sub.add_parser("topics", help="hashtag sets driven by common users")
    _add_common(p)
    p.add_argument("--n", type=int, default=2, help="hashtags per topic")
    p.add_argument("--candidates", default=None, metavar="K1;K2;...",
                   help="candidate hashtags (default: global abnormal ones)")
    p.set_defaults(fn=_cmd_topics, format_in="quad")

    p = sub.add_parser("predict", help="expected user-topic interaction count")
    _add_common(p)
    p.add_argument("--communities", required=True, help="communities.csv path")
    p.add_argument("--spreader", required=True)
    p.add_argument("--hashtags", required=True, metavar="K1;K2;...")
    p.add_argument("--day", required=True)
    p.add_argument("--hour", type=int, required=True)
    p.add_argument("--variant", choices=("literal", "mean-day"), default="literal")
    p.set_defaults(fn=_cmd_predict, format_in="quad")

    p = sub.add_parser("synth", help="write a planted-anomaly fixture")
    p.add_argument("--preset", choices=synth.PRESETS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--communities", type=int, default=0, metavar="N",
                   help="also write communities.csv with N round-robin groups")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("serve", help="start the HTTP query service")
    p.add_argument("--data", required=True)
    p.add_argument("--communities", default=None)
    p.add_argument("--tz", type=float, default=0.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"cubelens: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"cubelens: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
