"""
backend.py - Model backend contract and the trace-driven scripted backend.

Handles:
- ClipDescriptor / DecisionToken / ModelRequest types
- The five capabilities every backend offers (scene graph generation, query
  parsing, trigger decision, answer generation, text embedding)
- Prompt construction shared by all backends
- Parsing trigger replies into respond/silence decisions
- ScriptedBackend: deterministic playback of trace outputs
"""

import logging
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

from .prompts import (
    AssembledContext,
    GuidanceMode,
    PromptBundle,
    build_answer_prompt,
    build_query_parse_prompt,
    build_sgg_prompt,
    build_trigger_prompt,
    render_guidance,
)
from .retrieval import DEFAULT_EMBED_DIM, TokenEmbeddingMatrix, hashing_embedder
from .scene_graph import (
    SOURCE_MODEL,
    SOURCE_SCRIPTED,
    QueryConditionGraph,
    linearize_triplet,
    parse_triplet_lines,
)

if TYPE_CHECKING:
    from .trace import Trace

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for model backend errors."""
    pass


class BackendUnavailable(BackendError):
    """Raised when the backend cannot serve a request after retries."""
    pass


class BackendTimeout(BackendError):
    """Raised when a backend request times out after retries."""
    pass


class MissingScript(BackendError):
    """Raised when the scripted backend has no output for a request."""
    pass


CAP_SGG = "sgg"
CAP_QUERY_PARSE = "query_parse"
CAP_TRIGGER = "trigger"
CAP_ANSWER = "answer"

WARN_UNPARSEABLE_DECISION = "unparseable_decision"
WARN_BACKEND_UNAVAILABLE = "backend_unavailable"

_FIRST_WORD = re.compile(r"[A-Za-z]+")


class DecisionToken(str, Enum):
    RESPOND = "respond"
    SILENCE = "silence"


@dataclass(frozen=True)
class ClipDescriptor:
    """A window of sampled frames handed to scene graph generation."""
    frame_ids: tuple[int, ...]
    start_s: float
    end_s: float
    center_s: float
    frame_refs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.frame_ids:
            raise ValueError("Clip must contain at least one frame")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError(f"Clip frame ids must be strictly increasing: {self.frame_ids}")
        if not (self.start_s <= self.center_s <= self.end_s):
            raise ValueError(
                f"Clip times out of order: start={self.start_s}, center={self.center_s}, end={self.end_s}"
            )

    @property
    def span(self) -> tuple[int, int]:
        return (self.frame_ids[0], self.frame_ids[-1])


@dataclass(frozen=True)
class ModelRequest:
    """One text-generation request; fully determined by its prompt and media."""
    capability: str
    prompt: str
    frame_refs: tuple[str, ...] = ()
    clip_span: Optional[tuple[int, int]] = None
    step_index: Optional[int] = None
    # Retrieved graph lines already rendered into the prompt
    context_lines: tuple[str, ...] = ()


@dataclass(frozen=True)
class Decision:
    token: DecisionToken
    reply: Optional[str] = None
    warning: Optional[tuple[str, str]] = None


def parse_decision(reply: str) -> Decision:
    """
    Map a trigger reply to a decision by its first alphabetic word.

    "yes..." -> respond, "no..." -> silence, anything else -> silence with an
    unparseable-decision warning.
    """
    match = _FIRST_WORD.search(reply or "")
    word = match.group(0).lower() if match else ""
    if word.startswith("yes"):
        return Decision(DecisionToken.RESPOND, reply=reply)
    if word.startswith("no"):
        return Decision(DecisionToken.SILENCE, reply=reply)
    logger.warning(f"Unparseable trigger reply, treating as silence: {reply!r}")
    return Decision(
        DecisionToken.SILENCE,
        reply=reply,
        warning=(WARN_UNPARSEABLE_DECISION, f"reply: {reply!r}"),
    )


class ModelBackend(ABC):
    """
    Uniform access to the model capabilities used by the streaming pipeline.

    Subclasses implement complete() for text generation and embed_text() for
    embeddings; prompt construction lives here so every backend sends the
    same prompts for the same inputs.
    """

    graph_source = SOURCE_MODEL

    def __init__(self, bundle: Optional[PromptBundle] = None):
        self.bundle = bundle or PromptBundle()

    @abstractmethod
    def complete(self, request: ModelRequest) -> str:
        """Run one generation request and return the reply text."""

    @abstractmethod
    def embed_text(self, text: str) -> TokenEmbeddingMatrix:
        """Return per-token (or 1 x d pooled) embeddings for text."""

    def generate_scene_graph(
        self,
        clip: ClipDescriptor,
        query: Optional[str],
        mode: GuidanceMode,
        condition: Optional[QueryConditionGraph] = None,
    ) -> str:
        guidance = render_guidance(mode, query, condition)
        prompt = build_sgg_prompt(self.bundle, clip.start_s, clip.end_s, guidance)
        return self.complete(ModelRequest(
            capability=CAP_SGG,
            prompt=prompt,
            frame_refs=clip.frame_refs,
            clip_span=clip.span,
        ))

    def parse_query(self, query: str) -> str:
        if not query.strip():
            raise ValueError("Query must be non-empty")
        return self.complete(ModelRequest(
            capability=CAP_QUERY_PARSE,
            prompt=build_query_parse_prompt(self.bundle, query),
        ))

    def trigger_decision(self, context: AssembledContext, step_index: Optional[int] = None) -> Decision:
        """Ask whether to respond now; backend failures degrade to silence."""
        request = ModelRequest(
            capability=CAP_TRIGGER,
            prompt=build_trigger_prompt(self.bundle, context),
            frame_refs=context.frame_refs,
            step_index=step_index,
            context_lines=context.graph_lines,
        )
        try:
            reply = self.complete(request)
        except BackendError as e:
            logger.warning(f"Trigger request failed, treating as silence: {e}")
            return Decision(DecisionToken.SILENCE, warning=(WARN_BACKEND_UNAVAILABLE, str(e)))
        return parse_decision(reply)

    def generate_answer(self, context: AssembledContext) -> str:
        return self.complete(ModelRequest(
            capability=CAP_ANSWER,
            prompt=build_answer_prompt(self.bundle, context),
            frame_refs=context.frame_refs,
            context_lines=context.graph_lines,
        ))

    def close(self) -> None:
        pass


class ScriptedBackend(ModelBackend):
    """
    Plays back model outputs recorded in a trace.

    Outputs are keyed by (capability, clip span or decision step). A missing
    decision step falls back to "No", or, with decision_fallback="evidence",
    to "Yes" when a condition-graph phrase appears in the retrieved context.
    """

    graph_source = SOURCE_SCRIPTED

    def __init__(
        self,
        sgg_outputs: Optional[dict[tuple[int, int], str]] = None,
        decisions: Optional[dict[int, str]] = None,
        answer: Optional[str] = None,
        condition_text: Optional[str] = None,
        decision_fallback: str = "no",
        embed_dim: int = DEFAULT_EMBED_DIM,
        bundle: Optional[PromptBundle] = None,
    ):
        super().__init__(bundle)
        if decision_fallback not in ("no", "evidence"):
            raise ValueError(f"Unknown decision fallback: {decision_fallback}")
        self.sgg_outputs = dict(sgg_outputs or {})
        self.decisions = dict(decisions or {})
        self.answer = answer
        self.condition_text = condition_text
        self.decision_fallback = decision_fallback
        self.embed_dim = embed_dim
        self.requests: list[ModelRequest] = []
        triplets, _ = parse_triplet_lines(condition_text or "")
        self._condition_phrases = [linearize_triplet(t) for t in triplets]

    @classmethod
    def from_trace(
        cls,
        trace: "Trace",
        embed_dim: int = DEFAULT_EMBED_DIM,
        bundle: Optional[PromptBundle] = None,
    ) -> "ScriptedBackend":
        return cls(
            sgg_outputs={record.clip_span: record.output_text for record in trace.sgg},
            decisions={record.step_index: record.reply_text for record in trace.decisions},
            answer=trace.answer,
            condition_text=trace.query.scripted_condition_graph if trace.query else None,
            decision_fallback=trace.meta.decision_fallback,
            embed_dim=embed_dim,
            bundle=bundle,
        )

    def complete(self, request: ModelRequest) -> str:
        self.requests.append(request)

        if request.capability == CAP_SGG:
            if request.clip_span not in self.sgg_outputs:
                raise MissingScript(f"No scripted scene graph for clip {request.clip_span}")
            return self.sgg_outputs[request.clip_span]

        if request.capability == CAP_QUERY_PARSE:
            return self.condition_text or ""

        if request.capability == CAP_TRIGGER:
            if request.step_index in self.decisions:
                return self.decisions[request.step_index]
            if self.decision_fallback == "evidence" and self._evidence_present(request.context_lines):
                return "Yes"
            return "No"

        if request.capability == CAP_ANSWER:
            return self.answer or ""

        raise MissingScript(f"Unknown capability: {request.capability}")

    def _evidence_present(self, context_lines: tuple[str, ...]) -> bool:
        return any(phrase in line for line in context_lines for phrase in self._condition_phrases)

    def embed_text(self, text: str) -> TokenEmbeddingMatrix:
        return hashing_embedder(text, self.embed_dim)
