"""JSON report files and a plain-text summary table."""
from __future__ import annotations

import json
from pathlib import Path

from ..errors import DataError
from .metrics import CompressionReport

REPORT_SCHEMA = 1


def report_json(reports: list[CompressionReport], include_timing: bool = True,
                meta: dict | None = None) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "meta": meta or {},
        "reports": [r.to_dict(include_timing) for r in reports],
    }
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def emit_report(reports: list[CompressionReport], path, include_timing: bool = True,
                meta: dict | None = None) -> Path:
    """Write reports as JSON with a fixed key order (field order of :class:`CompressionReport`)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report_json(reports, include_timing, meta))
    except OSError as exc:
        raise DataError(f"{path}: cannot write report: {exc}") from exc
    return path


def load_report(path) -> tuple[list[CompressionReport], dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable report: {exc}") from exc
    return [CompressionReport.from_dict(r) for r in doc.get("reports", [])], doc.get("meta", {})


def format_table(reports: list[CompressionReport]) -> str:
    def fmt(v, spec):
        return "-" if v is None else format(v, spec)

    rows = [("method", "weights", "nonzero", "bytes", "rate", "stage", "speedup", "accuracy")]
    for r in reports:
        rows.append((r.method, str(r.total_params), str(r.nonzero_params), str(r.disk_bytes),
                     fmt(r.compression_rate, ".2f") + "x", fmt(r.stage_rate, ".2f"),
                     fmt(r.speedup, ".2f"), fmt(r.accuracy, ".4f")))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
