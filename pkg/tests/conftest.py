"""Shared fixtures: configs, hand-built traces and trace files."""

import json
from pathlib import Path
from typing import Optional

import pytest

from src.config import Config, default_config
from src.trace import (
    DecisionScript,
    FrameRecord,
    GroundTruth,
    QueryRecord,
    SggRecord,
    Trace,
    TraceMeta,
    trace_to_records,
)

DEFAULT_QUERY = "respond when the boy in red shirt is talking with others"
DEFAULT_CONDITION = "[boy in red shirt, talking with, others]"
NOISE_OUTPUT = "[man, on, grass]\n[cup, on, table]"


@pytest.fixture
def config(tmp_path) -> Config:
    """Default config with simulated latencies, so reports are reproducible."""
    cfg = default_config()
    cfg.pipeline.latency_profile = "embedding"
    cfg.logging.file = str(tmp_path / "logs" / "sgstream.log")
    return cfg


@pytest.fixture
def make_trace():
    """
    Factory for small traces.

    sgg maps clip spans to outputs; windows without an entry get NOISE_OUTPUT.
    decisions is a list of replies for steps 0, 1, ...
    """
    def build(
        trace_id: str = "trace-a",
        frames: int = 10,
        window: int = 4,
        fps: float = 1.0,
        t_ask: Optional[float] = 2.0,
        query: str = DEFAULT_QUERY,
        condition: Optional[str] = DEFAULT_CONDITION,
        sgg: Optional[dict[tuple[int, int], str]] = None,
        decisions: Optional[list[str]] = None,
        answer: Optional[str] = "The boy is talking with 20 people.",
        gt: Optional[tuple[float, float]] = None,
        expected: Optional[str] = "20",
        evidence_span: Optional[tuple[int, int]] = None,
        fallback: str = "no",
        mode: str = "proactive",
    ) -> Trace:
        outputs = dict(sgg or {})
        records = []
        for start in range(0, frames - window + 1, window):
            span = (start, start + window - 1)
            records.append(SggRecord(clip_span=span, output_text=outputs.get(span, NOISE_OUTPUT)))

        return Trace(
            trace_id=trace_id,
            meta=TraceMeta(total_frames=frames, fps=fps, trace_id=trace_id, decision_fallback=fallback),
            frames=[FrameRecord(index=i, ref=f"frame://{trace_id}/{i}") for i in range(frames)],
            query=(
                QueryRecord(t_ask=t_ask, text=query, scripted_condition_graph=condition, mode=mode)
                if t_ask is not None else None
            ),
            sgg=records,
            decisions=[DecisionScript(step_index=i, reply_text=r) for i, r in enumerate(decisions or [])],
            answer=answer,
            ground_truth=(
                GroundTruth(t_lo=gt[0], t_hi=gt[1], expected_answer=expected, evidence_clip_span=evidence_span)
                if gt is not None else None
            ),
        )

    return build


@pytest.fixture
def write_trace(tmp_path):
    """Write a Trace (or raw records) as JSONL and return the path."""
    def write(trace_or_records, name: str = "trace.jsonl", directory: Optional[Path] = None) -> Path:
        records = trace_or_records if isinstance(trace_or_records, list) else trace_to_records(trace_or_records)
        path = (directory or tmp_path) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
        return path

    return write
