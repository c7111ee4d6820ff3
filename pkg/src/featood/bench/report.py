"""Report rendering: canonical JSON, flat CSV and a Table-2 style markdown
table (datasets as rows, detectors as columns, group rows in bold)."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .benchmark import EvalReport

FORMATS = ("json", "csv", "markdown")


def to_json(report: EvalReport) -> str:
    """Canonical JSON: sorted keys, fixed separators, full float precision."""
    return json.dumps(report.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def from_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))


def to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "kind", "n", "dice", "detector", "auroc"])
    for r in report.rows:
        dice = "" if r.dice is None else repr(r.dice)
        if not r.auroc:
            w.writerow([r.name, r.kind, r.n, dice, "", ""])
        for det in report.detectors:
            if det in r.auroc:
                w.writerow([r.name, r.kind, r.n, dice, det, repr(r.auroc[det])])
    return buf.getvalue()


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def to_markdown(report: EvalReport) -> str:
    head = ["Dataset", "N", "Dice"] + list(report.detectors)
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in report.rows:
        name = f"**{r.name}**" if r.kind in ("group", "overall") else r.name
        cells = [name, str(r.n), _fmt(r.dice)] + [_fmt(r.auroc.get(d)) for d in report.detectors]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render(report: EvalReport, fmt: str) -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "csv":
        return to_csv(report)
    if fmt == "markdown":
        return to_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def emit_report(report: EvalReport, fmt: str, path: str | Path | None = None) -> str:
    """Render ``report`` and write it to ``path`` when given."""
    text = render(report, fmt)
    if path is not None:
        Path(path).write_text(text)
    return text


def load_report(path: str | Path) -> EvalReport:
    return from_json(Path(path).read_text())
