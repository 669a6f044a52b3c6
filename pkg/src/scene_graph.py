"""
scene_graph.py - Scene graph types, linearization and triplet parsing.

Handles:
- Triplet / SceneGraph / QueryConditionGraph domain types
- Linearizing triplets and graphs into the text used for embedding
- Timestamp tokens for retrieved context ("<2.0s>")
- Parsing the bracketed triplet grammar emitted by the model backend
- Record (dict) serialization used by traces and reports
"""

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Any, Optional

logger = logging.getLogger(__name__)


class SceneGraphError(Exception):
    """Base class for scene graph errors."""
    pass


class EmptyField(SceneGraphError):
    """Raised when a triplet field is empty after trimming."""
    pass


class SeparatorInField(SceneGraphError):
    """Raised when a triplet field contains the ";" that starts the graph separator."""
    pass


class ReservedCharacterInField(SceneGraphError):
    """Raised when a triplet field holds a character of the bracket grammar."""
    pass


class EmptyGraph(SceneGraphError):
    """Raised when linearizing a graph without triplets."""
    pass


class NegativeTime(SceneGraphError):
    """Raised for negative (or non-finite) timestamps."""
    pass


class NoTripletsFound(SceneGraphError):
    """Raised when model output contains no parseable triplet line."""

    def __init__(self, message: str, skipped_lines: int = 0):
        super().__init__(message)
        self.skipped_lines = skipped_lines


GRAPH_SEPARATOR = "; "
# Characters with meaning in the "[s, p, o]" line grammar
RESERVED_FIELD_CHARS = ",[]"

SOURCE_MODEL = "model"
SOURCE_SCRIPTED = "scripted"
SOURCE_QUERY = "query"
SOURCES = (SOURCE_MODEL, SOURCE_SCRIPTED, SOURCE_QUERY)

EMBED_GRAPH_TEXT = "graph_text"
EMBED_ORIGINAL_TEXT = "original_text"
EMBED_MODES = (EMBED_GRAPH_TEXT, EMBED_ORIGINAL_TEXT)

# One triplet per line, optionally behind a list marker: "- [a, b, c]", "2. [a, b, c]"
TRIPLET_LINE_PATTERN = re.compile(
    r"^(?:[-*]|\d+[.)])?\s*\[([^\[\]]+)\]\s*[,.;]?$"
)

_WHITESPACE_RUN = re.compile(r"\s+")


def normalize_label(text: str) -> str:
    """Replace underscores with spaces and collapse whitespace runs."""
    return _WHITESPACE_RUN.sub(" ", text.replace("_", " ")).strip()


@dataclass(frozen=True)
class Triplet:
    """An object-predicate-object relation; labels may carry folded attributes."""
    subject: str
    predicate: str
    object: str

    def __post_init__(self) -> None:
        for name in ("subject", "predicate", "object"):
            value = getattr(self, name)
            if not isinstance(value, str) or not normalize_label(value):
                raise EmptyField(f"Triplet {name} is empty: {value!r}")
            # a trailing ";" becomes "; " once the triplet is joined with spaces
            if GRAPH_SEPARATOR.strip() in value:
                raise SeparatorInField(
                    f"Triplet {name} contains the graph separator {GRAPH_SEPARATOR!r}: {value!r}"
                )
            reserved = [c for c in RESERVED_FIELD_CHARS if c in value]
            if reserved:
                raise ReservedCharacterInField(
                    f"Triplet {name} contains reserved characters {''.join(reserved)!r}: {value!r}"
                )
            object.__setattr__(self, name, value.strip())

    def as_list(self) -> list[str]:
        return [self.subject, self.predicate, self.object]


@dataclass(frozen=True)
class SceneGraph:
    """
    Timestamped scene graph generated from one clip (or parsed from a query).

    Triplet order is kept as produced and duplicates are allowed.
    """
    triplets: tuple[Triplet, ...]
    timestamp_s: float
    clip_span: Optional[tuple[int, int]] = None
    source: str = SOURCE_MODEL
    skipped_lines: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "triplets", tuple(self.triplets))
        if self.source not in SOURCES:
            raise ValueError(f"Unknown scene graph source: {self.source}")
        if not (self.timestamp_s >= 0) or not math.isfinite(self.timestamp_s):
            raise NegativeTime(f"Scene graph timestamp must be >= 0, got: {self.timestamp_s}")
        if self.source == SOURCE_QUERY:
            if self.clip_span is not None:
                raise ValueError("Query condition graphs have no clip span")
        else:
            if self.clip_span is None:
                raise ValueError(f"Scene graph from source '{self.source}' requires a clip span")
            start, end = self.clip_span
            if start < 0 or end < start:
                raise ValueError(f"Invalid clip span: {self.clip_span}")
            object.__setattr__(self, "clip_span", (int(start), int(end)))

    def within_span(self, fps: float, tolerance: float = 1e-9) -> bool:
        """Check that timestamp_s falls inside the clip span's time range."""
        if self.clip_span is None:
            return True
        start, end = self.clip_span
        return start / fps - tolerance <= self.timestamp_s <= end / fps + tolerance

    @property
    def objects(self) -> list[str]:
        """Distinct node labels in first-seen order."""
        seen: dict[str, None] = {}
        for t in self.triplets:
            seen.setdefault(t.subject, None)
            seen.setdefault(t.object, None)
        return list(seen)

    @property
    def relations(self) -> list[str]:
        """Distinct predicates in first-seen order."""
        seen: dict[str, None] = {}
        for t in self.triplets:
            seen.setdefault(t.predicate, None)
        return list(seen)


@dataclass(frozen=True)
class QueryConditionGraph:
    """The user query parsed into the evidence it is waiting for."""
    graph: SceneGraph
    original_query: str
    embed_mode: str = EMBED_GRAPH_TEXT
    parse_fallback: bool = False

    def __post_init__(self) -> None:
        if self.graph.source != SOURCE_QUERY:
            raise ValueError("Query condition graph must have source 'query'")
        if self.embed_mode not in EMBED_MODES:
            raise ValueError(f"Unknown embed mode: {self.embed_mode}")
        if self.embed_mode == EMBED_GRAPH_TEXT and not self.graph.triplets and not self.parse_fallback:
            raise ValueError("graph_text embedding requires triplets or a recorded parse fallback")

    def retrieval_text(self) -> str:
        """Text embedded for retrieval: graph text unless falling back to the raw query."""
        if self.embed_mode == EMBED_GRAPH_TEXT and not self.parse_fallback:
            return linearize_graph(self.graph)
        return self.original_query


def linearize_triplet(t: Triplet) -> str:
    """
    Render a triplet as a phrase: (boy, next_to, car) -> "boy next to car".

    Raises:
        EmptyField: If any field is empty after trimming
    """
    parts = [normalize_label(t.subject), normalize_label(t.predicate), normalize_label(t.object)]
    if not all(parts):
        raise EmptyField(f"Cannot linearize triplet with empty field: {t}")
    return " ".join(parts)


def linearize_graph(g: SceneGraph) -> str:
    """
    Join the graph's triplet phrases with "; " in triplet order.

    Raises:
        EmptyGraph: If the graph has no triplets
    """
    if not g.triplets:
        raise EmptyGraph("Cannot linearize a scene graph without triplets")
    return GRAPH_SEPARATOR.join(linearize_triplet(t) for t in g.triplets)


def format_timestamp_token(t_s: float) -> str:
    """
    Format a stream time as a timestamp token, e.g. 2.0 -> "<2.0s>".

    Raises:
        NegativeTime: If t_s is negative or not finite
    """
    if not (t_s >= 0) or not math.isfinite(t_s):
        raise NegativeTime(f"Timestamp must be >= 0, got: {t_s}")
    # + 0.0 turns -0.0 into 0.0
    return f"<{t_s + 0.0:.1f}s>"


def parse_triplet_lines(raw: str) -> tuple[list[Triplet], int]:
    """
    Extract bracketed triplets from line-oriented model output.

    Returns:
        Tuple of (triplets in line order, number of skipped non-blank lines)
    """
    triplets: list[Triplet] = []
    skipped = 0

    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue

        match = TRIPLET_LINE_PATTERN.match(line)
        if not match:
            skipped += 1
            continue

        fields = [part.strip() for part in match.group(1).split(",")]
        if len(fields) != 3:
            skipped += 1
            continue

        try:
            triplets.append(Triplet(*fields))
        except SceneGraphError as e:
            logger.debug(f"Skipping malformed triplet line {line!r}: {e}")
            skipped += 1

    return triplets, skipped


def parse_graph_from_model_output(
    raw: str,
    timestamp_s: float,
    clip_span: Optional[tuple[int, int]],
    source: str = SOURCE_MODEL,
) -> SceneGraph:
    """
    Parse generator output into a SceneGraph.

    Args:
        raw: Backend generation output, one "[subject, predicate, object]" per line
        timestamp_s: Graph timestamp in seconds from stream start
        clip_span: Inclusive frame-index range (None for query graphs)
        source: Graph source tag

    Returns:
        SceneGraph with skipped_lines set to the number of ignored lines

    Raises:
        NoTripletsFound: If no line matches the triplet grammar
    """
    triplets, skipped = parse_triplet_lines(raw)
    if not triplets:
        raise NoTripletsFound(
            f"No triplets found in model output ({skipped} non-matching lines)",
            skipped_lines=skipped,
        )
    if skipped:
        logger.debug(f"Parsed {len(triplets)} triplets, skipped {skipped} lines")
    return SceneGraph(
        triplets=tuple(triplets),
        timestamp_s=timestamp_s,
        clip_span=clip_span,
        source=source,
        skipped_lines=skipped,
    )


def render_graph(g: SceneGraph) -> str:
    """Render triplets in the bracket grammar understood by parse_graph_from_model_output."""
    return "\n".join(f"[{t.subject}, {t.predicate}, {t.object}]" for t in g.triplets)


def graph_to_record(g: SceneGraph) -> dict[str, Any]:
    """Serialize a graph to its trace/report record."""
    return {
        "timestamp_s": g.timestamp_s,
        "clip_span": list(g.clip_span) if g.clip_span is not None else None,
        "source": g.source,
        "triplets": [t.as_list() for t in g.triplets],
    }


def graph_from_record(data: dict[str, Any]) -> SceneGraph:
    """Rebuild a graph from graph_to_record output."""
    span = data.get("clip_span")
    return SceneGraph(
        triplets=tuple(Triplet(*fields) for fields in data.get("triplets", [])),
        timestamp_s=float(data["timestamp_s"]),
        clip_span=(int(span[0]), int(span[1])) if span else None,
        source=data.get("source", SOURCE_MODEL),
    )
