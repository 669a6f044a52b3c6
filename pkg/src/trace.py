"""
trace.py - Replayable trace files.

Handles:
- Parsing JSONL trace records (meta, frame, query, sgg, decision, answer, ground_truth)
- Validating trace invariants with line-numbered errors
- Converting traces back to records
- Generating synthetic traces for property tests and demos
"""

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .pipeline import sampling_rate_for

logger = logging.getLogger(__name__)


class TraceError(Exception):
    """Base class for trace errors."""
    pass


class MalformedRecord(TraceError):
    """Raised for a trace line that cannot be parsed into a record."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class InvariantViolation(TraceError):
    """Raised when a trace breaks a structural invariant."""
    pass


class TraceValidationError(TraceError):
    """Raised with every problem found while validating a trace."""

    def __init__(self, path: str, errors: list[TraceError]):
        summary = "; ".join(str(e) for e in errors[:5])
        more = f" (+{len(errors) - 5} more)" if len(errors) > 5 else ""
        super().__init__(f"Invalid trace {path}: {summary}{more}")
        self.errors = errors


RECORD_KINDS = ("meta", "frame", "query", "sgg", "decision", "answer", "ground_truth")
DECISION_FALLBACKS = ("no", "evidence")
QUERY_MODES = ("proactive", "reactive")
TIME_TOLERANCE = 1e-9


@dataclass
class TraceMeta:
    total_frames: int
    policy: str = "fixed"
    fps: float = 1.0
    trace_id: str = ""
    decision_fallback: str = "no"


@dataclass
class FrameRecord:
    index: int
    ref: str


@dataclass
class QueryRecord:
    t_ask: float
    text: str
    scripted_condition_graph: Optional[str] = None
    mode: str = "proactive"


@dataclass
class SggRecord:
    clip_span: tuple[int, int]
    output_text: str


@dataclass
class DecisionScript:
    step_index: int
    reply_text: str


@dataclass
class GroundTruth:
    t_lo: float
    t_hi: float
    expected_answer: Optional[str] = None
    evidence_clip_span: Optional[tuple[int, int]] = None


@dataclass
class Trace:
    trace_id: str
    meta: TraceMeta
    frames: list[FrameRecord] = field(default_factory=list)
    query: Optional[QueryRecord] = None
    sgg: list[SggRecord] = field(default_factory=list)
    decisions: list[DecisionScript] = field(default_factory=list)
    answer: Optional[str] = None
    ground_truth: Optional[GroundTruth] = None

    @property
    def fps(self) -> float:
        if self.meta.policy == "streamingbench":
            return sampling_rate_for(self.meta.total_frames)
        return float(self.meta.fps)

    @property
    def end_time(self) -> float:
        return max(len(self.frames) - 1, 0) / self.fps


def _span(value: Any, what: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise ValueError(f"{what} must be a [start, end] pair of integers")
    start, end = value
    if start < 0 or end < start:
        raise ValueError(f"{what} must satisfy 0 <= start <= end, got {value}")
    return (start, end)


def _number(data: dict[str, Any], key: str) -> float:
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{key} must be a number")
    return float(value)


def _text(data: dict[str, Any], key: str, required: bool = True) -> Optional[str]:
    value = data.get(key)
    if value is None and not required:
        return None
    if not isinstance(value, str):
        raise ValueError(f"{key} must be a string")
    return value


def parse_record(kind: str, data: dict[str, Any]) -> Any:
    """
    Build the typed record for one trace line.

    Raises:
        KeyError / ValueError: On missing or ill-typed fields
    """
    if kind == "meta":
        total = data["total_frames"]
        if isinstance(total, bool) or not isinstance(total, int) or total < 1:
            raise ValueError("total_frames must be a positive integer")
        policy = data.get("policy", "fixed")
        if policy not in ("fixed", "streamingbench"):
            raise ValueError(f"policy must be fixed or streamingbench, got {policy}")
        fps = _number(data, "fps") if "fps" in data else 1.0
        if not fps > 0:
            raise ValueError("fps must be > 0")
        fallback = data.get("decision_fallback", "no")
        if fallback not in DECISION_FALLBACKS:
            raise ValueError(f"decision_fallback must be one of {DECISION_FALLBACKS}")
        return TraceMeta(
            total_frames=total,
            policy=policy,
            fps=fps,
            trace_id=str(data.get("trace_id", "")),
            decision_fallback=fallback,
        )

    if kind == "frame":
        index = data["index"]
        if isinstance(index, bool) or not isinstance(index, int):
            raise ValueError("index must be an integer")
        return FrameRecord(index=index, ref=_text(data, "ref") or "")

    if kind == "query":
        t_ask = _number(data, "t_ask")
        if t_ask < 0:
            raise ValueError("t_ask must be >= 0")
        text = _text(data, "text") or ""
        if not text.strip():
            raise ValueError("query text must be non-empty")
        mode = data.get("mode", "proactive")
        if mode not in QUERY_MODES:
            raise ValueError(f"mode must be one of {QUERY_MODES}")
        return QueryRecord(
            t_ask=t_ask,
            text=text,
            scripted_condition_graph=_text(data, "scripted_condition_graph", required=False),
            mode=mode,
        )

    if kind == "sgg":
        return SggRecord(
            clip_span=_span(data["clip_span"], "clip_span"),
            output_text=_text(data, "output_text") or "",
        )

    if kind == "decision":
        step = data["step_index"]
        if isinstance(step, bool) or not isinstance(step, int) or step < 0:
            raise ValueError("step_index must be a non-negative integer")
        return DecisionScript(step_index=step, reply_text=_text(data, "reply_text") or "")

    if kind == "answer":
        return _text(data, "text")

    if kind == "ground_truth":
        span = data.get("evidence_clip_span")
        return GroundTruth(
            t_lo=_number(data, "t_lo"),
            t_hi=_number(data, "t_hi"),
            expected_answer=_text(data, "expected_answer", required=False),
            evidence_clip_span=_span(span, "evidence_clip_span") if span is not None else None,
        )

    raise ValueError(f"unknown record kind: {kind}")


def _validate(trace: Trace, errors: list[TraceError]) -> None:
    indices = [frame.index for frame in trace.frames]
    if indices != list(range(len(indices))):
        errors.append(InvariantViolation(
            "frame indices must be contiguous from 0 in file order"
        ))

    # streamingbench total_frames counts the source video, fixed counts the frame records
    total = trace.meta.total_frames
    if trace.meta.policy == "streamingbench":
        if len(trace.frames) > total:
            errors.append(InvariantViolation(
                f"meta total_frames ({total}) is less than the {len(trace.frames)} sampled frame records"
            ))
    elif len(trace.frames) != total:
        errors.append(InvariantViolation(
            f"meta total_frames ({total}) does not match the {len(trace.frames)} frame records"
        ))

    if trace.ground_truth is not None:
        if trace.query is None:
            errors.append(InvariantViolation("ground_truth requires a query record"))
        if trace.ground_truth.t_lo > trace.ground_truth.t_hi:
            errors.append(InvariantViolation(
                f"ground_truth t_lo ({trace.ground_truth.t_lo}) > t_hi ({trace.ground_truth.t_hi})"
            ))

    if trace.query is not None and trace.frames:
        if trace.query.t_ask > trace.end_time + TIME_TOLERANCE:
            errors.append(InvariantViolation(
                f"query t_ask ({trace.query.t_ask}s) is after the last frame ({trace.end_time}s)"
            ))

    steps = [d.step_index for d in trace.decisions]
    if len(steps) != len(set(steps)):
        errors.append(InvariantViolation("decision step_index values must be unique"))

    spans = [s.clip_span for s in trace.sgg]
    if len(spans) != len(set(spans)):
        errors.append(InvariantViolation("sgg clip_span values must be unique"))
    for span in spans:
        if span[1] >= len(trace.frames):
            errors.append(InvariantViolation(f"sgg clip_span {list(span)} exceeds the frame range"))


def parse_trace_lines(lines: list[str], source: str = "<memory>") -> Trace:
    """
    Parse and validate trace lines.

    Raises:
        TraceValidationError: With every MalformedRecord / InvariantViolation found
    """
    errors: list[TraceError] = []
    meta: Optional[TraceMeta] = None
    trace = Trace(trace_id="", meta=TraceMeta(total_frames=1))
    seen_meta = seen_query = seen_answer = seen_gt = False

    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue

        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            errors.append(MalformedRecord(line_no, f"invalid JSON: {e.msg}"))
            continue

        if not isinstance(data, dict) or "kind" not in data:
            errors.append(MalformedRecord(line_no, "record must be an object with a 'kind' field"))
            continue

        kind = data["kind"]
        if kind not in RECORD_KINDS:
            errors.append(MalformedRecord(line_no, f"unknown record kind: {kind}"))
            continue

        try:
            record = parse_record(kind, data)
        except (KeyError, ValueError, TypeError) as e:
            errors.append(MalformedRecord(line_no, f"{kind} record: {e}"))
            continue

        if kind == "meta":
            if seen_meta:
                errors.append(InvariantViolation(f"line {line_no}: duplicate meta record"))
                continue
            if trace.frames or seen_query or trace.sgg or trace.decisions or seen_answer or seen_gt:
                errors.append(InvariantViolation(f"line {line_no}: meta must be the first record"))
            seen_meta = True
            meta = record
        elif kind == "frame":
            trace.frames.append(record)
        elif kind == "query":
            if seen_query:
                errors.append(InvariantViolation(f"line {line_no}: at most one query record"))
                continue
            seen_query = True
            trace.query = record
        elif kind == "sgg":
            trace.sgg.append(record)
        elif kind == "decision":
            trace.decisions.append(record)
        elif kind == "answer":
            if seen_answer:
                errors.append(InvariantViolation(f"line {line_no}: at most one answer record"))
                continue
            seen_answer = True
            trace.answer = record
        elif kind == "ground_truth":
            if seen_gt:
                errors.append(InvariantViolation(f"line {line_no}: at most one ground_truth record"))
                continue
            seen_gt = True
            trace.ground_truth = record

    if meta is None:
        errors.append(InvariantViolation("missing meta record (must be the first line)"))
    else:
        trace.meta = meta
        trace.trace_id = meta.trace_id or Path(source).stem
        _validate(trace, errors)

    if errors:
        raise TraceValidationError(source, errors)

    return trace


def load_trace(path: str | Path) -> Trace:
    """
    Load and validate a JSONL trace file.

    Args:
        path: Path to the trace

    Returns:
        Validated Trace

    Raises:
        FileNotFoundError: If the file doesn't exist
        TraceValidationError: If any record is malformed or an invariant fails
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")

    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    trace = parse_trace_lines(lines, source=str(path))
    logger.debug(
        f"Loaded trace {trace.trace_id}: {len(trace.frames)} frames, "
        f"{len(trace.sgg)} sgg, {len(trace.decisions)} decisions"
    )
    return trace


def load_trace_dir(directory: str | Path) -> list[Trace]:
    """Load every *.jsonl trace in a directory, sorted by trace ID."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Trace directory not found: {directory}")
    traces = [load_trace(path) for path in sorted(directory.glob("*.jsonl"))]
    return sorted(traces, key=lambda trace: trace.trace_id)


def trace_to_records(trace: Trace) -> list[dict[str, Any]]:
    """Serialize a trace to its JSONL records (meta first)."""
    meta = trace.meta
    records: list[dict[str, Any]] = [{
        "kind": "meta",
        "total_frames": meta.total_frames,
        "policy": meta.policy,
        "fps": meta.fps,
        "trace_id": trace.trace_id,
        "decision_fallback": meta.decision_fallback,
    }]
    records += [{"kind": "frame", "index": f.index, "ref": f.ref} for f in trace.frames]
    if trace.query is not None:
        records.append({
            "kind": "query",
            "t_ask": trace.query.t_ask,
            "text": trace.query.text,
            "scripted_condition_graph": trace.query.scripted_condition_graph,
            "mode": trace.query.mode,
        })
    records += [
        {"kind": "sgg", "clip_span": list(s.clip_span), "output_text": s.output_text}
        for s in trace.sgg
    ]
    records += [
        {"kind": "decision", "step_index": d.step_index, "reply_text": d.reply_text}
        for d in trace.decisions
    ]
    if trace.answer is not None:
        records.append({"kind": "answer", "text": trace.answer})
    if trace.ground_truth is not None:
        gt = trace.ground_truth
        records.append({
            "kind": "ground_truth",
            "t_lo": gt.t_lo,
            "t_hi": gt.t_hi,
            "expected_answer": gt.expected_answer,
            "evidence_clip_span": list(gt.evidence_clip_span) if gt.evidence_clip_span else None,
        })
    return records


# Vocabulary for synthetic traces; the planted evidence uses labels outside it
NOISE_OBJECTS = ["man", "table", "grass", "car", "dog", "window", "chair", "tree", "cup", "road"]
NOISE_PREDICATES = ["on", "next_to", "behind", "holding", "near", "under"]
EVIDENCE_SUBJECTS = ["boy in red shirt", "number 20", "woman in blue", "white cat"]
EVIDENCE_PREDICATES = ["talking with", "appears_in", "opening", "jumping onto"]
EVIDENCE_OBJECTS = ["others", "sun", "front door", "sofa"]
NEGATIVE_REPLIES = ["No", "no, not yet.", "No.", "Not yet"]


def generate_trace(
    seed: int,
    frames: int,
    window: int = 4,
    fps: float = 1.0,
) -> Trace:
    """
    Build a random, valid trace with one planted evidence window.

    Noise windows use a fixed vocabulary; the evidence window additionally
    contains the query's condition triplet. Decisions are either scripted
    (negative replies, maybe one "Yes") or left to the evidence fallback.
    """
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got: {frames}")
    rng = random.Random(seed)
    trace_id = f"synthetic-{seed:06d}"

    evidence = (
        rng.choice(EVIDENCE_SUBJECTS),
        rng.choice(EVIDENCE_PREDICATES),
        rng.choice(EVIDENCE_OBJECTS),
    )
    condition_text = f"[{evidence[0]}, {evidence[1]}, {evidence[2]}]"
    query_text = f"Tell me when the {evidence[0]} is {evidence[1].replace('_', ' ')} the {evidence[2]}."

    n_windows = frames // window
    ask_index = rng.randrange(frames)
    t_ask = ask_index / fps

    sgg: list[SggRecord] = []
    evidence_span: Optional[tuple[int, int]] = None
    evidence_window = rng.randrange(n_windows) if n_windows else None
    for w in range(n_windows):
        span = (w * window, w * window + window - 1)
        lines = [
            f"[{rng.choice(NOISE_OBJECTS)}, {rng.choice(NOISE_PREDICATES)}, {rng.choice(NOISE_OBJECTS)}]"
            for _ in range(rng.randint(1, 4))
        ]
        if w == evidence_window:
            lines.insert(rng.randrange(len(lines) + 1), condition_text)
            evidence_span = span
        if rng.random() < 0.1:
            lines = ["Sure, here is the scene graph:"] + lines
        sgg.append(SggRecord(clip_span=span, output_text="\n".join(lines)))

    decisions: list[DecisionScript] = []
    fallback = "no"
    if rng.random() < 0.5:
        fallback = "evidence"
    else:
        steps = frames - ask_index
        yes_step = rng.randrange(steps) if rng.random() < 0.7 else None
        for step in range(steps):
            if step == yes_step:
                decisions.append(DecisionScript(step_index=step, reply_text="Yes"))
            elif rng.random() < 0.05:
                decisions.append(DecisionScript(step_index=step, reply_text="Maybe later"))
            else:
                decisions.append(DecisionScript(step_index=step, reply_text=rng.choice(NEGATIVE_REPLIES)))

    ground_truth = None
    if evidence_span is not None:
        t_lo = max(evidence_span[1] / fps, t_ask)
        ground_truth = GroundTruth(
            t_lo=t_lo,
            t_hi=t_lo + window / fps,
            expected_answer=f"answer {seed}",
            evidence_clip_span=evidence_span,
        )

    return Trace(
        trace_id=trace_id,
        meta=TraceMeta(
            total_frames=frames,
            policy="fixed",
            fps=fps,
            trace_id=trace_id,
            decision_fallback=fallback,
        ),
        frames=[FrameRecord(index=i, ref=f"frame://{trace_id}/{i:05d}") for i in range(frames)],
        query=QueryRecord(
            t_ask=t_ask,
            text=query_text,
            scripted_condition_graph=condition_text,
        ),
        sgg=sgg,
        decisions=decisions,
        answer=f"The answer is answer {seed}.",
        ground_truth=ground_truth,
    )
