"""
pipeline.py - Per-session streaming state machine.

Handles:
- Frame ingestion, non-overlapping clip windows and online scene graph generation
- Memory bank updates (linearize -> embed -> mean pool -> append)
- Query submission and query condition graphs
- Per-frame trigger decisions and the single response per query
- Reactive (answer-now) queries
- Per-stage latency accounting and sampling-rate rules
"""

import logging
import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

from .backend import BackendError, ClipDescriptor, DecisionToken, ModelBackend
from .config import PipelineConfig, validate_pipeline
from .prompts import AssembledContext, GuidanceMode
from .retrieval import (
    EMPTY_RESULT,
    DimensionMismatch,
    EmptyBank,
    GraphEmbedding,
    MemoryBank,
    RetrievalError,
    RetrievalResult,
    mean_pool,
    memory_append,
    retrieve_top_k,
)
from .scene_graph import (
    SOURCE_QUERY,
    NoTripletsFound,
    QueryConditionGraph,
    SceneGraph,
    format_timestamp_token,
    linearize_graph,
    parse_graph_from_model_output,
)

logger = logging.getLogger(__name__)


class PipelineError(Exception):
    """Base class for streaming pipeline errors."""
    pass


class OutOfOrderFrame(PipelineError):
    """Raised when a frame index is not the next expected index."""
    pass


class QueryAlreadyActive(PipelineError):
    """Raised when a query is submitted while another one is active."""
    pass


class AlreadyResponded(QueryAlreadyActive):
    """Raised when the session has already answered its query."""
    pass


class NoActiveQuery(PipelineError):
    """Raised when a decision is requested without an awaiting query."""
    pass


class NonPositiveLatency(PipelineError):
    """Raised when computing max FPS from a latency <= 0."""
    pass


WARN_SGG_FAILED = "sgg_failed"
WARN_SGG_PARSE_FAILED = "sgg_parse_failed"
WARN_QUERY_PARSE_FALLBACK = "query_parse_fallback"
WARN_ANSWER_FAILED = "answer_failed"

TIME_TOLERANCE = 1e-9


def sampling_rate_for(total_frames: int) -> float:
    """StreamingBench sampling: <300 frames at 1 FPS, 300-600 at 0.5, >600 at 0.2."""
    if total_frames < 1:
        raise ValueError(f"total_frames must be >= 1, got: {total_frames}")
    if total_frames < 300:
        return 1.0
    if total_frames <= 600:
        return 0.5
    return 0.2


def compute_max_fps(total_latency_ms: float) -> float:
    """
    Highest sustainable sampling rate for a per-frame latency: 1 s / latency.

    Raises:
        NonPositiveLatency: If total_latency_ms <= 0
    """
    if not (total_latency_ms > 0) or not math.isfinite(total_latency_ms):
        raise NonPositiveLatency(f"Total latency must be > 0 ms, got: {total_latency_ms}")
    return round(1000.0 / total_latency_ms, 1)


def resolve_fps(config: PipelineConfig, total_frames: Optional[int] = None) -> float:
    if config.sampling_policy == "streamingbench":
        if total_frames is None:
            raise PipelineError("streamingbench sampling needs the video's total frame count")
        return sampling_rate_for(total_frames)
    return float(config.fps)


class QueryPhase(str, Enum):
    IDLE = "idle"
    AWAITING_EVIDENCE = "awaiting_evidence"
    RESPONDED = "responded"


@dataclass(frozen=True)
class SessionWarning:
    kind: str
    t: float
    detail: str

    def to_record(self) -> dict[str, Any]:
        return {"kind": self.kind, "t": self.t, "detail": self.detail}


@dataclass(frozen=True)
class DecisionRecord:
    """One trigger step: decision, retrieved context summary and stage latencies."""
    t: float
    step_index: int
    decision: DecisionToken
    retrieved: tuple[dict[str, Any], ...]
    latencies_ms: dict[str, float]
    reply: Optional[str] = None

    def to_record(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "step_index": self.step_index,
            "decision": self.decision.value,
            "reply": self.reply,
            "retrieved": list(self.retrieved),
            "latencies_ms": dict(self.latencies_ms),
        }


class StreamSession:
    """
    State machine for one video stream and (at most) one query.

    Transitions: idle -> awaiting_evidence (submit_query) -> responded
    (respond decision), or idle -> responded directly (run_reactive).
    A session is driven by a single caller; sessions share nothing but the
    backend.
    """

    def __init__(
        self,
        session_id: str,
        backend: ModelBackend,
        config: Optional[PipelineConfig] = None,
        fps: Optional[float] = None,
        total_frames: Optional[int] = None,
    ):
        self.session_id = session_id
        self.backend = backend
        self.config = config or PipelineConfig()
        validate_pipeline(self.config)

        self.fps = float(fps) if fps is not None else resolve_fps(self.config, total_frames)
        if not self.fps > 0:
            raise PipelineError(f"Sampling rate must be > 0, got: {self.fps}")

        self.guidance_mode = GuidanceMode(self.config.guidance_mode)
        self.latency_profile = self.config.latency()

        self.frame_index = -1
        self.frame_refs: list[str] = []
        self.memory = MemoryBank(max_entries=self.config.memory_max_entries)

        self.phase = QueryPhase.IDLE
        self.query: Optional[str] = None
        self.condition: Optional[QueryConditionGraph] = None
        self.query_embedding: Optional[GraphEmbedding] = None
        self.t_ask: Optional[float] = None
        self.t_res: Optional[float] = None
        self.answer: Optional[str] = None
        self.reactive = False

        self.decision_log: list[DecisionRecord] = []
        self.warnings: list[SessionWarning] = []
        self.last_retrieval: RetrievalResult = EMPTY_RESULT

        self._window: list[int] = []
        self._embed_dim: Optional[int] = None
        self._frame_started = time.perf_counter()
        self._frame_sgg_ms = 0.0

    @property
    def t(self) -> float:
        """Stream time of the latest frame (0.0 before the first frame)."""
        return max(self.frame_index, 0) / self.fps

    @property
    def parse_fallback(self) -> bool:
        return self.condition is not None and self.condition.parse_fallback

    def _warn(self, kind: str, detail: str) -> None:
        logger.warning(f"[{self.session_id}] t={self.t:.1f}s {kind}: {detail}")
        self.warnings.append(SessionWarning(kind=kind, t=self.t, detail=detail))

    def _embed(self, text: str) -> GraphEmbedding:
        embedding = mean_pool(self.backend.embed_text(text))
        if self._embed_dim is None:
            self._embed_dim = embedding.shape[0]
        elif embedding.shape[0] != self._embed_dim:
            raise DimensionMismatch(
                f"Embedder returned dimension {embedding.shape[0]}, session uses {self._embed_dim}"
            )
        return embedding

    # Frame ingestion

    def ingest_frame(self, frame_ref: str, index: Optional[int] = None) -> Optional[SceneGraph]:
        """
        Advance the frame clock; generate a scene graph when a window completes.

        Args:
            frame_ref: Opaque frame handle (ID, URL or path)
            index: Frame index, checked against the expected next index

        Returns:
            The new scene graph, or None if no window completed or it was skipped

        Raises:
            OutOfOrderFrame: If index is not the next frame index
        """
        expected = self.frame_index + 1
        if index is not None and index != expected:
            raise OutOfOrderFrame(f"Expected frame {expected}, got {index}")

        self._frame_started = time.perf_counter()
        self._frame_sgg_ms = 0.0

        self.frame_index = expected
        self.frame_refs.append(frame_ref)
        self._window.append(expected)

        if len(self._window) < self.config.clip_window_frames:
            return None

        frame_ids = tuple(self._window)
        self._window = []
        clip = ClipDescriptor(
            frame_ids=frame_ids,
            start_s=frame_ids[0] / self.fps,
            end_s=frame_ids[-1] / self.fps,
            center_s=(frame_ids[0] + frame_ids[-1]) / 2 / self.fps,
            frame_refs=tuple(self.frame_refs[i] for i in frame_ids),
        )

        started = time.perf_counter()
        graph = self._generate_graph(clip)
        self._frame_sgg_ms = (time.perf_counter() - started) * 1000
        return graph

    def _generate_graph(self, clip: ClipDescriptor) -> Optional[SceneGraph]:
        awaiting = self.phase == QueryPhase.AWAITING_EVIDENCE
        query = self.query if awaiting else None

        try:
            raw = self.backend.generate_scene_graph(clip, query, self.guidance_mode, self.condition)
        except BackendError as e:
            self._warn(WARN_SGG_FAILED, f"clip {clip.span}: {e}")
            return None

        try:
            graph = parse_graph_from_model_output(
                raw, clip.center_s, clip.span, source=self.backend.graph_source
            )
        except NoTripletsFound as e:
            self._warn(WARN_SGG_PARSE_FAILED, f"clip {clip.span}: {e}")
            return None

        text = linearize_graph(graph)
        try:
            embedding = self._embed(text)
            seq_id = memory_append(self.memory, graph, embedding, text=text)
        except (BackendError, RetrievalError, ValueError) as e:
            self._warn(WARN_SGG_FAILED, f"clip {clip.span}: embedding failed: {e}")
            return None

        logger.debug(
            f"[{self.session_id}] graph #{seq_id} at {graph.timestamp_s:.1f}s "
            f"({len(graph.triplets)} triplets): {text[:80]}"
        )
        return graph

    # Queries

    def _build_condition(self, query: str) -> QueryConditionGraph:
        t = self.t
        fallback = False
        try:
            raw = self.backend.parse_query(query)
            graph = parse_graph_from_model_output(raw, t, None, source=SOURCE_QUERY)
        except (NoTripletsFound, BackendError) as e:
            self._warn(WARN_QUERY_PARSE_FALLBACK, f"embedding original query text: {e}")
            graph = SceneGraph(triplets=(), timestamp_s=t, clip_span=None, source=SOURCE_QUERY)
            fallback = True

        return QueryConditionGraph(
            graph=graph,
            original_query=query,
            embed_mode=self.config.embed_mode,
            parse_fallback=fallback,
        )

    def _check_idle(self) -> None:
        if self.phase == QueryPhase.AWAITING_EVIDENCE:
            raise QueryAlreadyActive(f"Session {self.session_id} already has an active query")
        if self.phase == QueryPhase.RESPONDED:
            raise AlreadyResponded(f"Session {self.session_id} has already responded")

    def _check_time(self, t: Optional[float]) -> float:
        if t is not None and abs(t - self.t) > TIME_TOLERANCE:
            raise PipelineError(f"Requested time {t}s does not match stream time {self.t}s")
        return self.t

    def _activate_query(self, query: str, t_ask: Optional[float]) -> None:
        if not query or not query.strip():
            raise ValueError("Query must be non-empty")
        self._check_idle()
        t = self._check_time(t_ask)

        condition = self._build_condition(query)
        self.query_embedding = self._embed(condition.retrieval_text())
        self.query = query
        self.condition = condition
        self.t_ask = t

    def submit_query(self, query: str, t_ask: Optional[float] = None) -> None:
        """
        Register the session's query at the current stream time.

        Raises:
            QueryAlreadyActive: If a query is active (AlreadyResponded if answered)
        """
        self._activate_query(query, t_ask)
        self.phase = QueryPhase.AWAITING_EVIDENCE
        logger.info(
            f"[{self.session_id}] query at {self.t_ask:.1f}s "
            f"(embed={self.config.embed_mode}, fallback={self.parse_fallback}): {query}"
        )

    # Retrieval and context

    def _retrieve(self) -> RetrievalResult:
        if self.config.context_mode == "none" or self.query_embedding is None:
            return EMPTY_RESULT
        try:
            return retrieve_top_k(self.memory, self.query_embedding, self.config.top_k)
        except EmptyBank:
            return EMPTY_RESULT

    def _assemble(self, result: RetrievalResult, instruction: str) -> AssembledContext:
        frames = self.frame_refs[: self.frame_index + 1]
        cap = self.config.max_context_frames
        if cap is not None and len(frames) > cap:
            frames = frames[-cap:]

        # Chronological order inside the prompt
        hits = sorted(result.hits, key=lambda hit: (hit.entry.timestamp_s, hit.entry.seq_id))
        if self.config.context_mode == "timestamped_graphs":
            lines = tuple(f"{format_timestamp_token(hit.entry.timestamp_s)} {hit.entry.text}" for hit in hits)
        else:
            lines = tuple(hit.entry.text for hit in hits)

        return AssembledContext(
            frame_refs=tuple(frames),
            graph_lines=lines,
            instruction=instruction,
            query=self.query or "",
            retrieved_timestamps=tuple(hit.entry.timestamp_s for hit in hits),
        )

    def assemble_context(self, t: Optional[float] = None, instruction: str = "trigger") -> AssembledContext:
        """
        Frames, then retrieved graph lines ("<2.0s> woman in red"), then the instruction.

        Raises:
            NoActiveQuery: If no query is awaiting evidence
        """
        if self.phase != QueryPhase.AWAITING_EVIDENCE:
            raise NoActiveQuery(f"Session {self.session_id} has no query awaiting evidence")
        self._check_time(t)
        return self._assemble(self._retrieve(), instruction)

    # Decisions

    def _latencies(self, sgg_ms: float, retrieval_ms: float, trigger_ms: float, total_ms: float) -> dict[str, float]:
        if self.latency_profile is not None:
            profile = self.latency_profile
            return {
                "sgg": profile.sgg_ms,
                "retrieval": profile.retrieval_ms,
                "trigger": profile.trigger_ms,
                "total": profile.total_ms,
            }
        return {"sgg": sgg_ms, "retrieval": retrieval_ms, "trigger": trigger_ms, "total": total_ms}

    def step_decision(self, t: Optional[float] = None) -> DecisionRecord:
        """
        Run one trigger step at the current frame.

        On a respond decision, generates the answer from the same retrieved
        context and moves to responded. Backend failures degrade to silence.

        Raises:
            NoActiveQuery: If no query has been submitted
            AlreadyResponded: If the query was already answered
        """
        if self.phase == QueryPhase.RESPONDED:
            raise AlreadyResponded(f"Session {self.session_id} has already responded")
        if self.phase != QueryPhase.AWAITING_EVIDENCE:
            raise NoActiveQuery(f"Session {self.session_id} has no query awaiting evidence")
        now = self._check_time(t)
        if self.t_ask is not None and now < self.t_ask - TIME_TOLERANCE:
            raise PipelineError(f"Decision at {now}s precedes the query at {self.t_ask}s")

        step_index = len(self.decision_log)

        started = time.perf_counter()
        result = self._retrieve()
        retrieval_ms = (time.perf_counter() - started) * 1000
        self.last_retrieval = result

        context = self._assemble(result, "trigger")
        started = time.perf_counter()
        decision = self.backend.trigger_decision(context, step_index=step_index)
        trigger_ms = (time.perf_counter() - started) * 1000
        total_ms = (time.perf_counter() - self._frame_started) * 1000

        if decision.warning is not None:
            self._warn(*decision.warning)

        token = decision.token
        if token == DecisionToken.RESPOND:
            try:
                answer = self.backend.generate_answer(self._assemble(result, "answer"))
            except BackendError as e:
                self._warn(WARN_ANSWER_FAILED, str(e))
                token = DecisionToken.SILENCE
            else:
                self.t_res = now
                self.answer = answer
                self.phase = QueryPhase.RESPONDED
                logger.info(f"[{self.session_id}] responded at {now:.1f}s (step {step_index})")

        record = DecisionRecord(
            t=now,
            step_index=step_index,
            decision=token,
            retrieved=tuple(result.summary()),
            latencies_ms=self._latencies(self._frame_sgg_ms, retrieval_ms, trigger_ms, total_ms),
            reply=decision.reply,
        )
        self.decision_log.append(record)
        logger.debug(f"[{self.session_id}] t={now:.1f}s decision={token.value} retrieved={len(result.hits)}")
        return record

    def run_reactive(self, query: str, t_ask: Optional[float] = None) -> str:
        """
        Answer immediately (t_res = t_ask) using the same context as a proactive response.

        Raises:
            QueryAlreadyActive: If the session is not idle
            BackendError: If answer generation fails; the session is left idle
        """
        previous_retrieval = self.last_retrieval
        self._activate_query(query, t_ask)
        result = self._retrieve()
        try:
            answer = self.backend.generate_answer(self._assemble(result, "answer"))
        except BackendError:
            self.query = None
            self.condition = None
            self.query_embedding = None
            self.t_ask = None
            self.last_retrieval = previous_retrieval
            raise

        self.last_retrieval = result
        self.t_res = self.t_ask
        self.answer = answer
        self.reactive = True
        self.phase = QueryPhase.RESPONDED
        logger.info(f"[{self.session_id}] reactive answer at {self.t_res:.1f}s")
        return answer

    # Reporting

    def latency_summary(self) -> dict[str, Any]:
        """Mean per-stage latency over decision steps and the implied max FPS."""
        if not self.decision_log:
            return {"steps": 0, "sgg": None, "retrieval": None, "trigger": None, "total": None, "max_fps": None}

        n = len(self.decision_log)
        summary: dict[str, Any] = {"steps": n}
        for stage in ("sgg", "retrieval", "trigger", "total"):
            summary[stage] = math.fsum(r.latencies_ms[stage] for r in self.decision_log) / n
        summary["max_fps"] = compute_max_fps(summary["total"]) if summary["total"] > 0 else None
        return summary
