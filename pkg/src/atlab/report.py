"""Deterministic JSON and CSV emission of run reports."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

from .pipeline import RunReport, Table

FORMATS = ("json", "csv")


def _clean(v):
    if isinstance(v, float):
        return None if math.isnan(v) else round(v, 10)
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if hasattr(v, "item"):
        return _clean(v.item())
    return v


def report_body(report: RunReport, timings: bool = True) -> dict:
    body = {
        "seed": report.seed,
        "stages": list(report.stages),
        "config": _clean(report.config),
        "metrics": _clean(dict(sorted(report.metrics.items()))),
    }
    if timings:
        body["wall_clock_seconds"] = dict(report.wall_clock)
    return body


def render_json(report: RunReport, timings: bool = True) -> str:
    return json.dumps(report_body(report, timings), sort_keys=True, indent=2) + "\n"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, (list, tuple)):
        return " ".join(_cell(x) for x in v)
    return str(v)


def render_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def metrics_csv(report: RunReport) -> str:
    return render_csv(("key", "value"), sorted(report.metrics.items()))


def emit_report(report: RunReport, out_dir, formats: Sequence[str] = FORMATS) -> list[Path]:
    """Write report.json and/or metrics.csv plus one CSV per table; returns written paths."""
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown report format(s) {bad}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    if "json" in formats:
        put("report.json", render_json(report))
    if "csv" in formats:
        put("metrics.csv", metrics_csv(report))
        for name, tab in sorted(report.tables.items()):
            put(f"{name}.csv", render_csv(tab.header, tab.rows))
    return written


def load_report(path) -> RunReport:
    body = json.loads(Path(path).read_text())
    return RunReport(seed=body["seed"], config=body["config"], stages=body["stages"],
                     metrics=body["metrics"], tables={}, wall_clock=body.get("wall_clock_seconds", {}))


def empty_table(header: Sequence[str]) -> Table:
    return Table(tuple(header))
