"""
retrieval.py - Graph embeddings, similarity and the per-session memory bank.

Handles:
- Mean pooling of token embedding matrices into graph embeddings
- Cosine similarity between graph embeddings
- The deterministic hashing embedder used when no remote embedder is attached
- Append-only, time-ordered memory bank with top-K retrieval
"""

import hashlib
import heapq
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Optional

import numpy as np
import numpy.typing as npt

from .scene_graph import SceneGraph

logger = logging.getLogger(__name__)

TokenEmbeddingMatrix = npt.NDArray[np.float64]
GraphEmbedding = npt.NDArray[np.float64]

DEFAULT_EMBED_DIM = 64


class RetrievalError(Exception):
    """Base class for embedding and retrieval errors."""
    pass


class ZeroVector(RetrievalError):
    """Raised when an embedding has zero norm."""
    pass


class DimensionMismatch(RetrievalError):
    """Raised when embedding dimensions disagree."""
    pass


class TimestampRegression(RetrievalError):
    """Raised when appending a graph older than the newest bank entry."""
    pass


class EmptyBank(RetrievalError):
    """Raised when retrieving from a bank with no entries."""
    pass


class EmptyText(RetrievalError):
    """Raised when embedding empty text."""
    pass


class InvalidK(RetrievalError):
    """Raised for k < 1."""
    pass


def as_token_matrix(values: Any) -> TokenEmbeddingMatrix:
    """
    Validate and convert values to an n_tokens x d float matrix.

    Raises:
        ValueError: If the shape is not 2-d with n >= 1, d >= 1, or values are not finite
    """
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"Token embedding matrix must be n x d with n, d >= 1, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("Token embedding matrix contains non-finite values")
    return m


def mean_pool(m: Any) -> GraphEmbedding:
    """Average a token embedding matrix over the token dimension."""
    m = as_token_matrix(m)
    # fsum is exactly rounded, so the result does not depend on token order
    sums = np.array([math.fsum(column) for column in m.T], dtype=np.float64)
    return sums / m.shape[0]


def cosine_similarity(a: GraphEmbedding, b: GraphEmbedding) -> float:
    """
    Cosine similarity of two graph embeddings, clipped to [-1, 1].

    Raises:
        DimensionMismatch: If the vectors differ in length
        ZeroVector: If either vector has zero norm
    """
    if a.shape != b.shape:
        raise DimensionMismatch(f"Cannot compare embeddings of shape {a.shape} and {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("Cosine similarity undefined for a zero-norm embedding")
    sim = float(np.dot(a, b)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, sim))


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int) -> GraphEmbedding:
    # seed = first 8 bytes of sha256(utf-8 token), big-endian; PCG64 standard normals, unit norm
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "big")
    rng = np.random.Generator(np.random.PCG64(seed))
    vector = rng.standard_normal(dim)
    vector /= np.linalg.norm(vector)
    vector.flags.writeable = False
    return vector


def hashing_embedder(text: str, dim: int = DEFAULT_EMBED_DIM) -> TokenEmbeddingMatrix:
    """
    Deterministic bag-of-tokens embedder.

    Each whitespace token maps to a unit-norm pseudo-random vector seeded by
    sha256 of its UTF-8 bytes, so identical text yields identical matrices on
    every platform. Word order is not encoded.

    Args:
        text: Input text
        dim: Embedding dimension

    Returns:
        n_tokens x dim matrix

    Raises:
        EmptyText: If text has no tokens
    """
    tokens = text.split()
    if not tokens:
        raise EmptyText("Cannot embed empty text")
    if dim < 1:
        raise ValueError(f"Embedding dimension must be >= 1, got: {dim}")
    return np.vstack([_token_vector(token, dim) for token in tokens])


@dataclass(frozen=True)
class MemoryEntry:
    graph: SceneGraph
    embedding: GraphEmbedding
    timestamp_s: float
    seq_id: int
    text: str = ""


@dataclass(frozen=True)
class RetrievalHit:
    entry: MemoryEntry
    similarity: float


@dataclass(frozen=True)
class RetrievalResult:
    """Top-K hits ordered by similarity desc, ties by larger seq_id first."""
    hits: tuple[RetrievalHit, ...]
    k_requested: int

    def summary(self) -> list[dict[str, Any]]:
        """Report form: timestamps, similarities and graph texts."""
        return [
            {
                "seq_id": hit.entry.seq_id,
                "timestamp_s": hit.entry.timestamp_s,
                "clip_span": list(hit.entry.graph.clip_span) if hit.entry.graph.clip_span else None,
                "similarity": hit.similarity if math.isfinite(hit.similarity) else None,
                "text": hit.entry.text,
            }
            for hit in self.hits
        ]


EMPTY_RESULT = RetrievalResult(hits=(), k_requested=0)


class MemoryBank:
    """
    Time-ordered store of (graph, embedding) entries for one stream session.

    The first append fixes the embedding dimension. With max_entries set,
    the oldest entries are evicted; seq_ids keep increasing regardless.
    """

    def __init__(self, max_entries: Optional[int] = None):
        if max_entries is not None and max_entries < 1:
            raise ValueError(f"max_entries must be >= 1, got: {max_entries}")
        self.max_entries = max_entries
        self._entries: list[MemoryEntry] = []
        self._next_seq = 0
        self._dim: Optional[int] = None
        self._last_timestamp: Optional[float] = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._entries)

    @property
    def dim(self) -> Optional[int]:
        return self._dim

    def append(self, graph: SceneGraph, embedding: GraphEmbedding, text: str = "") -> int:
        """
        Append a graph and its pooled embedding.

        Returns:
            The new entry's seq_id

        Raises:
            DimensionMismatch: If the embedding length differs from the bank's
            TimestampRegression: If the graph is older than the newest entry
        """
        embedding = np.asarray(embedding, dtype=np.float64)
        if embedding.ndim != 1 or not np.all(np.isfinite(embedding)):
            raise ValueError("Graph embedding must be a finite 1-d vector")

        if self._dim is None:
            self._dim = embedding.shape[0]
        elif embedding.shape[0] != self._dim:
            raise DimensionMismatch(
                f"Embedding dimension {embedding.shape[0]} does not match bank dimension {self._dim}"
            )

        if self._last_timestamp is not None and graph.timestamp_s < self._last_timestamp:
            raise TimestampRegression(
                f"Graph at {graph.timestamp_s}s is older than last entry at {self._last_timestamp}s"
            )

        seq_id = self._next_seq
        embedding = embedding.copy()
        embedding.flags.writeable = False
        self._entries.append(MemoryEntry(
            graph=graph,
            embedding=embedding,
            timestamp_s=graph.timestamp_s,
            seq_id=seq_id,
            text=text,
        ))
        self._next_seq += 1
        self._last_timestamp = graph.timestamp_s

        if self.max_entries is not None and len(self._entries) > self.max_entries:
            excess = len(self._entries) - self.max_entries
            self._entries = self._entries[excess:]
            logger.debug(f"Evicted {excess} oldest memory entries")

        return seq_id


def memory_append(bank: MemoryBank, graph: SceneGraph, embedding: GraphEmbedding, text: str = "") -> int:
    """Append to the bank; see MemoryBank.append."""
    return bank.append(graph, embedding, text=text)


def _similarity_or_floor(a: GraphEmbedding, b: GraphEmbedding) -> float:
    try:
        return cosine_similarity(a, b)
    except ZeroVector:
        return -math.inf


def retrieve_top_k(bank: MemoryBank, query_emb: GraphEmbedding, k: int) -> RetrievalResult:
    """
    Retrieve the k entries most similar to the query embedding.

    Zero-norm embeddings rank last; ties go to the more recent entry.

    Raises:
        InvalidK: If k < 1
        EmptyBank: If the bank has no entries
        DimensionMismatch: If the query dimension differs from the bank's
    """
    if k < 1:
        raise InvalidK(f"k must be >= 1, got: {k}")
    if len(bank) == 0:
        raise EmptyBank("Memory bank is empty")

    query_emb = np.asarray(query_emb, dtype=np.float64)
    if bank.dim is not None and query_emb.shape != (bank.dim,):
        raise DimensionMismatch(
            f"Query embedding shape {query_emb.shape} does not match bank dimension {bank.dim}"
        )

    scored = [(_similarity_or_floor(entry.embedding, query_emb), entry) for entry in bank.entries]
    top = heapq.nsmallest(k, scored, key=lambda item: (-item[0], -item[1].seq_id))

    return RetrievalResult(
        hits=tuple(RetrievalHit(entry=entry, similarity=sim) for sim, entry in top),
        k_requested=k,
    )
