"""
prompts.py - Prompt templates and prompt construction.

Handles:
- PromptBundle: the four templates (scene graph generation, query parsing,
  trigger, answer) with {query}/{context}/{timestamps} placeholders
- Loading templates from plain-text files, falling back to the defaults
- Guidance modes for scene graph generation (none / object / query)
- AssembledContext: frames + retrieved graph lines + instruction
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .scene_graph import QueryConditionGraph, format_timestamp_token

logger = logging.getLogger(__name__)


class PromptError(Exception):
    """Raised when a prompt template is invalid."""
    pass


class GuidanceMode(str, Enum):
    """How the user query is injected into scene graph generation."""
    NONE = "none"
    OBJECT = "object"
    QUERY = "query"


PLACEHOLDER_PATTERN = re.compile(r"\{(query|context|timestamps)\}")

# Defaults paraphrase the described prompt structure; edit via prompts.dir.
DEFAULT_SGG_TEMPLATE = (
    "You are watching a short clip of a video stream {timestamps}.\n"
    "Describe the clip as a scene graph: the visible objects, with attributes folded "
    "into the object name (e.g. \"woman in red\"), and the relations between them.\n"
    "Prioritize content related to the following guidance: {query}\n"
    "Only describe what is visible in this clip. Do not add objects that have not appeared.\n"
    "Output one triplet per line as [subject, predicate, object] and nothing else."
)

DEFAULT_QUERY_PARSE_TEMPLATE = (
    "Convert the user query into a scene graph describing the visual evidence that must "
    "appear in the video before the query can be answered.\n"
    "Query: {query}\n"
    "Output one triplet per line as [subject, predicate, object] and nothing else."
)

DEFAULT_TRIGGER_TEMPLATE = (
    "{context}"
    "Question: {query}\n"
    "Has the evidence needed to answer the question appeared in the video so far? "
    "Should I answer now? Yes or No."
)

DEFAULT_ANSWER_TEMPLATE = (
    "{context}"
    "Question: {query}\n"
    "Answer the question based on the video and the scene graphs above."
)

CONTEXT_HEADER = "Scene graphs retrieved from the stream:"

TEMPLATE_FILES = {
    "sgg_template": "sgg.txt",
    "query_parse_template": "query_parse.txt",
    "trigger_template": "trigger.txt",
    "answer_template": "answer.txt",
}

DECLARED_PLACEHOLDERS = {
    "sgg_template": ("query", "timestamps"),
    "query_parse_template": ("query",),
    "trigger_template": ("context", "query"),
    "answer_template": ("context", "query"),
}


def _check_template(name: str, template: str) -> None:
    found = PLACEHOLDER_PATTERN.findall(template)
    for placeholder in DECLARED_PLACEHOLDERS[name]:
        count = found.count(placeholder)
        if count != 1:
            raise PromptError(
                f"{name} must contain {{{placeholder}}} exactly once, found {count}"
            )
    extra = set(found) - set(DECLARED_PLACEHOLDERS[name])
    if extra:
        raise PromptError(f"{name} uses undeclared placeholders: {sorted(extra)}")


def fill_template(template: str, **values: str) -> str:
    """Substitute named placeholders; other braces are left alone."""
    return PLACEHOLDER_PATTERN.sub(lambda m: values.get(m.group(1), m.group(0)), template)


@dataclass(frozen=True)
class PromptBundle:
    sgg_template: str = DEFAULT_SGG_TEMPLATE
    query_parse_template: str = DEFAULT_QUERY_PARSE_TEMPLATE
    trigger_template: str = DEFAULT_TRIGGER_TEMPLATE
    answer_template: str = DEFAULT_ANSWER_TEMPLATE

    def __post_init__(self) -> None:
        for name in DECLARED_PLACEHOLDERS:
            _check_template(name, getattr(self, name))


def load_prompt_bundle(directory: Optional[str | Path] = None) -> PromptBundle:
    """
    Load templates from a directory of plain-text files.

    Missing files keep the default template for that slot.

    Raises:
        PromptError: If a loaded template has wrong placeholders
        FileNotFoundError: If the directory does not exist
    """
    if directory is None:
        return PromptBundle()

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Prompt directory not found: {directory}")

    templates: dict[str, str] = {}
    for slot, filename in TEMPLATE_FILES.items():
        path = directory / filename
        if path.exists():
            templates[slot] = path.read_text(encoding="utf-8").rstrip("\n")
            logger.info(f"Loaded {slot} from {path}")

    return PromptBundle(**templates)


def render_guidance(
    mode: GuidanceMode,
    query: Optional[str],
    condition: Optional[QueryConditionGraph] = None,
) -> str:
    """
    Text injected into the scene graph generation prompt.

    none -> "None"; object -> "objects: A, B. relations: r"; query -> the verbatim query.
    Without an active query every mode renders "None". Object guidance with an
    empty (fallback) condition graph injects the verbatim query instead.
    """
    if mode == GuidanceMode.NONE or not query:
        return "None"
    if mode == GuidanceMode.OBJECT:
        if condition is None:
            raise PromptError("Object guidance requires a parsed query condition graph")
        if condition.graph.triplets:
            return (
                f"objects: {', '.join(condition.graph.objects)}. "
                f"relations: {', '.join(condition.graph.relations)}"
            )
    return query


def render_clip_times(start_s: float, end_s: float) -> str:
    return f"from {format_timestamp_token(start_s)} to {format_timestamp_token(end_s)}"


def build_sgg_prompt(bundle: PromptBundle, start_s: float, end_s: float, guidance: str) -> str:
    return fill_template(
        bundle.sgg_template,
        query=guidance,
        timestamps=render_clip_times(start_s, end_s),
    )


def build_query_parse_prompt(bundle: PromptBundle, query: str) -> str:
    return fill_template(bundle.query_parse_template, query=query)


@dataclass(frozen=True)
class AssembledContext:
    """
    Model input for a trigger or answer call, in order: frames, retrieved
    graph lines, instruction text.
    """
    frame_refs: tuple[str, ...]
    graph_lines: tuple[str, ...] = ()
    instruction: str = "trigger"
    query: str = ""
    retrieved_timestamps: tuple[float, ...] = field(default=(), compare=False)

    @property
    def graph_block(self) -> str:
        return "\n".join(self.graph_lines)

    def context_section(self) -> str:
        if not self.graph_lines:
            return ""
        return f"{CONTEXT_HEADER}\n{self.graph_block}\n\n"


def build_trigger_prompt(bundle: PromptBundle, context: AssembledContext) -> str:
    return fill_template(bundle.trigger_template, context=context.context_section(), query=context.query)


def build_answer_prompt(bundle: PromptBundle, context: AssembledContext) -> str:
    return fill_template(bundle.answer_template, context=context.context_section(), query=context.query)
