"""
harness.py - Trace replay, timing scoring and ablation sweeps.

Handles:
- Replaying a trace through a StreamSession bound to a scripted backend
- Timing verdicts (in_window / premature / missed) against ground truth windows
- Answer matching, evidence retrieval rank and latency summaries per session
- Suite aggregates, optionally running traces on a worker pool
- Sweep grids over pipeline settings with one aggregate row per setting
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .backend import BackendError, ModelBackend, ScriptedBackend
from .config import Config, ConfigError, validate_pipeline
from .pipeline import (
    TIME_TOLERANCE,
    WARN_ANSWER_FAILED,
    QueryPhase,
    SessionWarning,
    StreamSession,
)
from .prompts import PromptBundle
from .trace import GroundTruth, Trace

logger = logging.getLogger(__name__)


VERDICT_IN_WINDOW = "in_window"
VERDICT_PREMATURE = "premature"
VERDICT_MISSED = "missed"
VERDICTS = (VERDICT_IN_WINDOW, VERDICT_PREMATURE, VERDICT_MISSED)

# Grid keys and the PipelineConfig field each one sets
GRID_DIMENSIONS = {
    "guidance_mode": "guidance_mode",
    "embed_mode": "embed_mode",
    "context_mode": "context_mode",
    "top_k": "top_k",
    "K": "top_k",
}


def timing_verdict(t_res: Optional[float], ground_truth: Optional[GroundTruth]) -> Optional[str]:
    """
    Classify a response time against the ground-truth window [t_lo, t_hi].

    No response, or a response after t_hi, counts as missed.
    Returns None when there is no ground truth to score against.
    """
    if ground_truth is None:
        return None
    if t_res is None:
        return VERDICT_MISSED
    if t_res < ground_truth.t_lo - TIME_TOLERANCE:
        return VERDICT_PREMATURE
    if t_res <= ground_truth.t_hi + TIME_TOLERANCE:
        return VERDICT_IN_WINDOW
    return VERDICT_MISSED


def answer_matches(answer: Optional[str], expected: Optional[str]) -> Optional[bool]:
    """Case-insensitive containment of the expected answer; None if nothing is expected."""
    if expected is None:
        return None
    if answer is None:
        return False
    return expected.strip().lower() in answer.lower()


def evidence_rank(session: StreamSession, span: Optional[tuple[int, int]]) -> Optional[int]:
    """1-based rank of the evidence clip in the session's last retrieval."""
    if span is None:
        return None
    for rank, hit in enumerate(session.last_retrieval.hits, start=1):
        if hit.entry.graph.clip_span == tuple(span):
            return rank
    return None


@dataclass
class SessionReport:
    """Outcome of replaying one trace."""
    trace_id: str
    mode: Optional[str]
    t_ask: Optional[float]
    t_res: Optional[float]
    timing_verdict: Optional[str]
    answer: Optional[str]
    expected_answer: Optional[str]
    answer_match: Optional[bool]
    evidence_span: Optional[list[int]]
    evidence_rank: Optional[int]
    parse_fallback: bool
    memory_size: int
    latency: dict[str, Any]
    decision_log: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[dict[str, Any]] = field(default_factory=list)

    def to_record(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "mode": self.mode,
            "t_ask": self.t_ask,
            "t_res": self.t_res,
            "timing_verdict": self.timing_verdict,
            "answer": self.answer,
            "expected_answer": self.expected_answer,
            "answer_match": self.answer_match,
            "evidence_span": self.evidence_span,
            "evidence_rank": self.evidence_rank,
            "parse_fallback": self.parse_fallback,
            "memory_size": self.memory_size,
            "latency": dict(self.latency),
            "decision_log": list(self.decision_log),
            "warnings": list(self.warnings),
        }


def _mean(values: list[float]) -> Optional[float]:
    if not values:
        return None
    return math.fsum(values) / len(values)


def _rate(hits: int, total: int) -> Optional[float]:
    return hits / total if total else None


def suite_aggregates(sessions: list[SessionReport]) -> dict[str, Any]:
    """
    Suite metrics over per-session reports.

    Rates use only sessions that can be scored for them (ground truth,
    expected answer, evidence span); a rate with no eligible session is None.
    """
    verdicts = [s.timing_verdict for s in sessions if s.timing_verdict is not None]
    matches = [s.answer_match for s in sessions if s.answer_match is not None]
    ranked = [s.evidence_rank for s in sessions if s.evidence_span is not None]
    latencies = [s.latency["total"] for s in sessions if s.latency.get("total") is not None]

    return {
        "sessions": len(sessions),
        "scored": len(verdicts),
        "timing_accuracy": _rate(verdicts.count(VERDICT_IN_WINDOW), len(verdicts)),
        "premature_rate": _rate(verdicts.count(VERDICT_PREMATURE), len(verdicts)),
        "missed_rate": _rate(verdicts.count(VERDICT_MISSED), len(verdicts)),
        "answer_match_rate": _rate(sum(1 for m in matches if m), len(matches)),
        "mean_decision_latency_ms": _mean(latencies),
        "evidence_top1_rate": _rate(sum(1 for r in ranked if r == 1), len(ranked)),
    }


def pipeline_settings(config: Config) -> dict[str, Any]:
    """Report form of the settings that shape a run."""
    p = config.pipeline
    profile = p.latency()
    return {
        "clip_window_frames": p.clip_window_frames,
        "top_k": p.top_k,
        "guidance_mode": p.guidance_mode,
        "embed_mode": p.embed_mode,
        "context_mode": p.context_mode,
        "max_context_frames": p.max_context_frames,
        "memory_max_entries": p.memory_max_entries,
        "latency_profile": (
            None if profile is None
            else {"sgg_ms": profile.sgg_ms, "retrieval_ms": profile.retrieval_ms, "trigger_ms": profile.trigger_ms}
        ),
    }


@dataclass
class RunReport:
    """Per-session reports (sorted by trace ID) plus suite aggregates."""
    settings: dict[str, Any]
    sessions: list[SessionReport]

    @property
    def aggregates(self) -> dict[str, Any]:
        return suite_aggregates(self.sessions)

    def to_record(self) -> dict[str, Any]:
        return {
            "kind": "run",
            "settings": dict(self.settings),
            "aggregates": self.aggregates,
            "sessions": [s.to_record() for s in self.sessions],
        }


@dataclass
class SweepRow:
    label: str
    overrides: dict[str, Any]
    aggregates: dict[str, Any]

    def to_record(self) -> dict[str, Any]:
        return {"label": self.label, "overrides": dict(self.overrides), "aggregates": dict(self.aggregates)}


@dataclass
class SweepReport:
    """One aggregate row per grid setting, in grid order."""
    grid: dict[str, list[Any]]
    rows: list[SweepRow] = field(default_factory=list)

    def to_record(self) -> dict[str, Any]:
        return {
            "kind": "sweep",
            "grid": {key: list(values) for key, values in self.grid.items()},
            "rows": [row.to_record() for row in self.rows],
        }


def run_scenario(
    trace: Trace,
    config: Config,
    bundle: Optional[PromptBundle] = None,
    backend: Optional[ModelBackend] = None,
) -> SessionReport:
    """
    Replay one trace and score it.

    Each frame is ingested, then the query is submitted at the first frame
    whose time reaches t_ask, then one trigger step runs while the query is
    awaiting evidence. Replay stops once the session has responded.

    Args:
        trace: Validated trace
        config: Configuration (pipeline and embedder sections are used)
        bundle: Prompt templates (defaults when None)
        backend: Backend to use instead of the trace's scripted outputs

    Returns:
        SessionReport for the trace
    """
    if backend is None:
        backend = ScriptedBackend.from_trace(trace, embed_dim=config.embedder.dim, bundle=bundle)

    session = StreamSession(trace.trace_id, backend, config.pipeline, fps=trace.fps)
    query = trace.query

    for frame in trace.frames:
        session.ingest_frame(frame.ref, frame.index)

        if query is not None and session.t >= query.t_ask - TIME_TOLERANCE:
            if query.mode == "reactive":
                try:
                    session.run_reactive(query.text)
                except BackendError as e:
                    logger.warning(f"[{trace.trace_id}] reactive answer failed: {e}")
                    session.warnings.append(SessionWarning(kind=WARN_ANSWER_FAILED, t=session.t, detail=str(e)))
                break
            if session.phase == QueryPhase.IDLE:
                session.submit_query(query.text)

        if session.phase == QueryPhase.AWAITING_EVIDENCE:
            session.step_decision()

        if session.phase == QueryPhase.RESPONDED:
            break

    gt = trace.ground_truth
    expected = gt.expected_answer if gt else None
    span = gt.evidence_clip_span if gt else None
    verdict = timing_verdict(session.t_res, gt) if query is not None else None

    report = SessionReport(
        trace_id=trace.trace_id,
        mode=query.mode if query else None,
        t_ask=session.t_ask,
        t_res=session.t_res,
        timing_verdict=verdict,
        answer=session.answer,
        expected_answer=expected,
        answer_match=answer_matches(session.answer, expected) if query else None,
        evidence_span=list(span) if span else None,
        evidence_rank=evidence_rank(session, span),
        parse_fallback=session.parse_fallback,
        memory_size=len(session.memory),
        latency=session.latency_summary(),
        decision_log=[record.to_record() for record in session.decision_log],
        warnings=[warning.to_record() for warning in session.warnings],
    )
    logger.info(
        f"[{trace.trace_id}] t_ask={report.t_ask} t_res={report.t_res} "
        f"verdict={report.timing_verdict} steps={len(report.decision_log)} warnings={len(report.warnings)}"
    )
    return report


def run_suite(
    traces: list[Trace],
    config: Config,
    bundle: Optional[PromptBundle] = None,
    backend: Optional[ModelBackend] = None,
) -> RunReport:
    """
    Run every trace and collect a suite report sorted by trace ID.

    With harness.workers > 1, traces run on a thread pool; sessions share
    nothing but the backend, so completion order does not affect the report.
    Without a backend each trace plays back its own scripted outputs.
    """
    workers = max(1, config.harness.workers)
    if workers == 1 or len(traces) <= 1:
        sessions = [run_scenario(trace, config, bundle, backend) for trace in traces]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sessions = list(pool.map(lambda trace: run_scenario(trace, config, bundle, backend), traces))

    sessions.sort(key=lambda s: s.trace_id)
    report = RunReport(settings=pipeline_settings(config), sessions=sessions)

    agg = report.aggregates
    logger.info(
        f"Suite: {agg['sessions']} sessions, {agg['scored']} scored, "
        f"timing_accuracy={agg['timing_accuracy']}"
    )
    return report


def normalize_grid(raw: Any) -> dict[str, list[Any]]:
    """
    Check a sweep grid mapping: known dimensions, each with a list of values.

    "K" is accepted as an alias of top_k. An empty or missing grid is {}.

    Raises:
        ConfigError: For unknown dimensions or non-list values
    """
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"Sweep grid must be a mapping, got: {type(raw).__name__}")

    grid: dict[str, list[Any]] = {}
    for key, values in raw.items():
        if key not in GRID_DIMENSIONS:
            raise ConfigError(
                f"Unknown sweep dimension: {key}. Known: {', '.join(GRID_DIMENSIONS)}"
            )
        if not isinstance(values, list):
            values = [values]
        target = GRID_DIMENSIONS[key]
        if target in grid:
            raise ConfigError(f"Sweep dimension given twice: {target}")
        grid[target] = values
    return grid


def load_grid(path: str | Path) -> dict[str, list[Any]]:
    """
    Load a sweep grid from YAML.

    Raises:
        FileNotFoundError: If the file doesn't exist
        ConfigError: If the grid is malformed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Grid file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {path}: {e}") from e

    return normalize_grid(raw)


def expand_grid(grid: dict[str, list[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of the grid, first dimension varying slowest."""
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _label(overrides: dict[str, Any]) -> str:
    return ", ".join(f"{key}={value}" for key, value in overrides.items())


def ablation_sweep(
    traces: list[Trace],
    base_config: Config,
    grid: dict[str, list[Any]],
    bundle: Optional[PromptBundle] = None,
    backend: Optional[ModelBackend] = None,
) -> SweepReport:
    """
    Run every trace under every grid setting.

    Args:
        traces: Validated traces
        base_config: Settings not varied by the grid
        grid: Dimension -> values (see normalize_grid)
        bundle: Prompt templates
        backend: Shared backend (scripted playback per trace when None)

    Returns:
        SweepReport with one aggregate row per setting, in grid order

    Raises:
        ConfigError: If a grid value is invalid for its dimension
    """
    grid = normalize_grid(grid)
    report = SweepReport(grid=grid)

    for overrides in expand_grid(grid):
        pipeline = replace(base_config.pipeline, **overrides)
        validate_pipeline(pipeline)
        config = replace(base_config, pipeline=pipeline)

        logger.info(f"Sweep row: {_label(overrides)}")
        suite = run_suite(traces, config, bundle, backend)
        report.rows.append(SweepRow(label=_label(overrides), overrides=overrides, aggregates=suite.aggregates))

    logger.info(f"Sweep complete: {len(report.rows)} rows over {len(traces)} traces")
    return report
