"""Metric tables and SVG plots of extraction quality against overlap ratio."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib
from matplotlib.figure import Figure

REQUIRED = ("task", "method", "data_mode", "overlap_ratio", "metric", "value", "n")
SIMULTANEOUS = "simultaneous"

matplotlib.rcParams["svg.hashsalt"] = "spatial-llm"
matplotlib.rcParams["svg.fonttype"] = "none"


class EmptyMetricsError(ValueError):
    pass


def read_metrics(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"{path}: missing columns {', '.join(missing)}")
        rows = [dict(r, value=float(r["value"]), n=int(r["n"])) for r in reader]
    if not rows:
        raise EmptyMetricsError(f"{path}: no metric rows")
    return rows


def _pct(x: float | None) -> str:
    return "-" if x is None or math.isnan(x) else f"{100 * x:.1f}"


def _deg(x: float | None) -> str:
    return "-" if x is None or math.isnan(x) else f"{x:.2f}"


def _table(header: Sequence[str], body: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *map(fmt, body)])


def _group(rows: Iterable[dict], task: str) -> dict[tuple, dict[str, float]]:
    out: dict[tuple, dict[str, float]] = defaultdict(dict)
    for r in rows:
        if r["task"] == task:
            out[(r["method"], r["data_mode"], r["overlap_ratio"])][r["metric"]] = r["value"]
    return out


def summary_table(rows: Sequence[dict]) -> str:
    """Plain-text tables: localisation errors, recognition WER, and extraction at zero overlap."""
    parts = []
    ssl = _group(rows, "ssl")
    if ssl:
        body = [
            [m, d, _deg(v.get("delta_a")), _deg(v.get("delta_e")), _deg(v.get("delta_d"))]
            for (m, d, _), v in sorted(ssl.items())
        ]
        parts.append("Localisation (degrees)\n" + _table(("Method", "Data", "Azimuth", "Elevation", "Distance"), body))
    fsr = _group(rows, "fsr")
    if fsr:
        body = [[m, d, _pct(v.get("wer"))] for (m, d, _), v in sorted(fsr.items())]
        parts.append("Recognition\n" + _table(("Method", "Data", "WER%"), body))
    lse = {k: v for k, v in _group(rows, "lse").items() if k[2] in ("0", "0.0")}
    if lse:
        body = [
            [m, d, _pct(v.get("sr")), _pct(v.get("swer")), _pct(v.get("wer"))] for (m, d, _), v in sorted(lse.items())
        ]
        parts.append("Extraction, no overlap\n" + _table(("Method", "Data", "SR%", "sWER%", "WER%"), body))
    return "\n\n".join(parts) + "\n"


def overlap_series(rows: Sequence[dict], metric: str) -> dict[str, tuple[list[float], list[float], float | None]]:
    """Per (method, data) label: sorted ratios, values, and the simultaneous value if present."""
    acc: dict[str, dict] = defaultdict(lambda: {"pts": {}, "sim": None})
    for r in rows:
        if r["task"] != "lse" or r["metric"] != metric:
            continue
        label = f"{r['method']} / {r['data_mode']}"
        if r["overlap_ratio"] == SIMULTANEOUS:
            acc[label]["sim"] = r["value"]
        else:
            acc[label]["pts"][float(r["overlap_ratio"])] = r["value"]
    out = {}
    for label in sorted(acc):
        pts = acc[label]["pts"]
        xs = sorted(pts)
        out[label] = (xs, [pts[x] for x in xs], acc[label]["sim"])
    return out


def plot_overlap(rows: Sequence[dict], metric: str, path: str | os.PathLike) -> int:
    """Write one SVG; returns the number of plotted points.

    Every point is its own artist with gid ``point-<series>-<i>``, and the
    simultaneous condition is a dotted horizontal line with gid ``sim-<series>``.
    """
    series = overlap_series(rows, metric)
    if not series:
        raise EmptyMetricsError(f"no extraction rows for metric {metric!r}")
    fig = Figure(figsize=(5.0, 3.6))
    ax = fig.add_subplot()
    colors = matplotlib.rcParams["axes.prop_cycle"].by_key()["color"]
    count = 0
    for s, (label, (xs, ys, sim)) in enumerate(series.items()):
        c = colors[s % len(colors)]
        pct = [100 * y for y in ys]
        ax.plot(xs, pct, "-", color=c, label=label, gid=f"line-{s}")
        for i, (x, y) in enumerate(zip(xs, pct)):
            ax.plot([x], [y], "o", color=c, gid=f"point-{s}-{i}")
            count += 1
        if sim is not None and not math.isnan(sim):
            ax.axhline(100 * sim, linestyle=":", color=c, gid=f"sim-{s}")
    ax.set_xlabel("overlap ratio")
    ax.set_ylabel(f"{metric.upper()} (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    return count


def build_report(rows: Sequence[dict], out_dir: str | os.PathLike) -> list[Path]:
    if not rows:
        raise EmptyMetricsError("no metric rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "summary.txt"]
    written[0].write_text(summary_table(rows))
    if any(r["task"] == "lse" for r in rows):
        for metric in ("sr", "wer"):
            p = out / f"overlap_{metric}.svg"
            plot_overlap(rows, metric, p)
            written.append(p)
    return written
