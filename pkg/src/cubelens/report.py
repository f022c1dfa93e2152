"""File reports for CLI runs: matplotlib figures next to delimited dumps.

Every report lands in one directory: cells.csv (the evaluation),
histogram.csv + histogram.png (the deviation distribution), and -- when
events are in play -- timeline.png with event spans shaded. Figures are
rendered with the Agg backend so reports work headless.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .deviation import ContextEvaluation, OutlierSet, histogram

_SPAN_COLOR = "#f1c40f"


def json_number(x):
    """NaN/inf are not JSON; report them as null."""
    if x is None or x != x or x in (float("inf"), float("-inf")):
        return None
    return x


def eval_payload(ev: ContextEvaluation, outliers: OutlierSet, dims) -> dict:
    """The JSON shape of an evaluation, shared by CLI and service."""
    cells = {c.coord: c for c in ev.cells}
    return {
        "dims": list(dims),
        "deviation": ev.kind,
        "cells": len(ev.cells),
        "mean": json_number(ev.mean),
        "std": json_number(ev.std),
        "center": json_number(outliers.center),
        "scale": json_number(outliers.scale),
        "outliers": [
            {"coord": list(coord), "observed": cells[coord].observed,
             "expected": cells[coord].expected, "deviation": dev, "sign": sign}
            for coord, dev, sign in outliers.outliers
        ],
        "capped": [{"coord": list(coord), "observed": obs} for coord, obs in outliers.capped],
        "unsupported": [list(coord) for coord in outliers.unsupported],
        "histogram": histogram(ev),
    }


def event_payload(base, idx: int, event) -> dict:
    return {
        "id": idx,
        "label": event.label(),
        "hours": [list(cell) for cell in event.hours],
        "days": list(event.days),
        "H_e": sorted(event.H_e),
        "total": base.select_cells(("day", "hour"), event.hours).grand_total,
    }


def write_cells_csv(path, ev: ContextEvaluation, outliers: OutlierSet,
                    dim_names) -> Path:
    path = Path(path)
    flagged = {coord: sign for coord, _, sign in outliers.outliers}
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([*dim_names, "observed", "expected", "deviation", "flag", "outlier"])
        for cell in ev.cells:
            dev = "" if cell.deviation is None else repr(cell.deviation)
            writer.writerow([*cell.coord, cell.observed, repr(cell.expected),
                             dev, cell.flag, flagged.get(cell.coord, "")])
    return path


def write_histogram_csv(path, hist: dict) -> Path:
    path = Path(path)
    edges, counts = hist["edges"], hist["counts"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for left, right, count in zip(edges, edges[1:], counts):
            writer.writerow([repr(left), repr(right), count])
    return path


def render_histogram(path, hist: dict, title: str, xlabel: str = "deviation") -> Path:
    path = Path(path)
    edges, counts = hist["edges"], hist["counts"]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    widths = [b - a for a, b in zip(edges, edges[1:])]
    ax.bar(edges[:-1], counts, width=widths, align="edge",
           color="#2c3e50", edgecolor="white", linewidth=0.3)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("cells")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_timeline(path, hour_eval: ContextEvaluation, events, title: str) -> Path:
    """Observed volume per calendar hour with event spans shaded."""
    path = Path(path)
    cells = sorted(hour_eval.cells, key=lambda c: c.coord)
    index = {cell.coord: i for i, cell in enumerate(cells)}
    volumes = [cell.observed for cell in cells]
    fig, ax = plt.subplots(figsize=(11, 4))
    ax.plot(range(len(volumes)), volumes, linewidth=0.8, color="#2c3e50")
    for event in events or ():
        lo = index.get(event.hours[0])
        hi = index.get(event.hours[-1])
        if lo is None or hi is None:
            continue
        ax.axvspan(lo - 0.5, hi + 0.5, color=_SPAN_COLOR, alpha=0.5)
        ax.annotate(event.label(), (lo, max(volumes) * 0.97),
                    fontsize=7, rotation=90, va="top")
    days = sorted({cell.coord[0] for cell in cells})
    ticks = [index[(d, 0)] for d in days if (d, 0) in index]
    ax.set_xticks(ticks)
    ax.set_xticklabels([str(d) for d in days if (d, 0) in index],
                       rotation=90, fontsize=6)
    ax.set_title(title)
    ax.set_ylabel("interactions / hour")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(out_dir, ev: ContextEvaluation, outliers: OutlierSet, dim_names,
                 title: str, events=None) -> list[Path]:
    """Render the standard report bundle; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = histogram(ev)
    written = [
        write_cells_csv(out / "cells.csv", ev, outliers, dim_names),
        write_histogram_csv(out / "histogram.csv", hist),
        render_histogram(out / "histogram.png", hist, title),
    ]
    if events is not None:
        written.append(render_timeline(out / "timeline.png", ev, events, title))
    return written
