"""
storage.py - Report and trace file output.

Handles:
- Canonical JSON reports (sorted keys, 2-space indent)
- CSV aggregate rows and Markdown comparison tables
- JSONL writing for generated traces
- Atomic writes (temp file, then rename)
"""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

from .harness import RunReport, SweepReport

logger = logging.getLogger(__name__)


class StorageError(Exception):
    """Raised when storage operations fail."""
    pass


REPORT_FORMATS = ("json", "csv", "markdown")

AGGREGATE_COLUMNS = [
    "sessions",
    "scored",
    "timing_accuracy",
    "premature_rate",
    "missed_rate",
    "answer_match_rate",
    "mean_decision_latency_ms",
    "evidence_top1_rate",
]

Report = Union[RunReport, SweepReport]


def _write_text(path: Path, text: str) -> None:
    """Write text atomically: temp file first, then rename."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_file = path.with_suffix(path.suffix + ".tmp")
        with open(temp_file, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        temp_file.replace(path)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        raise StorageError(f"Failed to write {path}: {e}") from e


def to_canonical_json(record: Any) -> str:
    return json.dumps(record, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _aggregate_rows(report: Report) -> list[tuple[str, dict[str, Any]]]:
    if isinstance(report, SweepReport):
        return [(row.label, row.aggregates) for row in report.rows]
    return [("run", report.aggregates)]


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_csv(report: Report) -> str:
    """Header plus one aggregate row per config (a single row for a run)."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["config"] + AGGREGATE_COLUMNS)
    for label, aggregates in _aggregate_rows(report):
        writer.writerow([label] + [_cell(aggregates.get(column)) for column in AGGREGATE_COLUMNS])
    return buffer.getvalue()


def render_markdown(report: Report) -> str:
    """Comparison table; run reports add a per-session table."""
    lines = [
        "| config | " + " | ".join(AGGREGATE_COLUMNS) + " |",
        "|" + "---|" * (len(AGGREGATE_COLUMNS) + 1),
    ]
    for label, aggregates in _aggregate_rows(report):
        cells = [_cell(aggregates.get(column)) or "-" for column in AGGREGATE_COLUMNS]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")

    if isinstance(report, RunReport) and report.sessions:
        lines += [
            "",
            "| trace | t_ask | t_res | verdict | answer_match | evidence_rank | warnings |",
            "|---|---|---|---|---|---|---|",
        ]
        for s in report.sessions:
            cells = [s.trace_id, s.t_ask, s.t_res, s.timing_verdict, s.answer_match, s.evidence_rank, len(s.warnings)]
            lines.append("| " + " | ".join(_cell(c) or "-" for c in cells) + " |")

    return "\n".join(lines) + "\n"


def render_report(report: Report, fmt: str) -> str:
    """
    Render a report in one of REPORT_FORMATS.

    Raises:
        ValueError: For an unknown format
    """
    if fmt == "json":
        return to_canonical_json(report.to_record())
    if fmt == "csv":
        return render_csv(report)
    if fmt == "markdown":
        return render_markdown(report)
    raise ValueError(f"Unknown report format: {fmt}. Known: {', '.join(REPORT_FORMATS)}")


def emit_report(report: Report, fmt: str, path: Optional[str | Path] = None) -> str:
    """
    Render a report and write it to path (if given).

    Args:
        report: Run or sweep report
        fmt: json (canonical, lossless), csv (aggregates) or markdown (tables)
        path: Output file; None only renders

    Returns:
        The rendered text

    Raises:
        ValueError: For an unknown format
        StorageError: If the file cannot be written
    """
    text = render_report(report, fmt)
    if path is not None:
        path = Path(path)
        _write_text(path, text)
        logger.info(f"Wrote {fmt} report to {path}")
    return text


def render_jsonl(records: list[dict[str, Any]]) -> str:
    return "".join(json.dumps(record, ensure_ascii=False) + "\n" for record in records)


def write_jsonl(records: list[dict[str, Any]], path: str | Path) -> int:
    """
    Write records as JSONL atomically.

    Returns:
        Number of records written
    """
    path = Path(path)
    _write_text(path, render_jsonl(records))
    logger.info(f"Wrote {len(records)} records to {path}")
    return len(records)
