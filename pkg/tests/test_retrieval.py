"""Tests for pooling, cosine similarity, the hashing embedder and top-K retrieval."""

import math
import time

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from src.retrieval import (
    DimensionMismatch,
    EmptyBank,
    EmptyText,
    InvalidK,
    MemoryBank,
    TimestampRegression,
    ZeroVector,
    cosine_similarity,
    hashing_embedder,
    mean_pool,
    memory_append,
    retrieve_top_k,
)
from src.scene_graph import SOURCE_SCRIPTED, SceneGraph, Triplet

TRIPLET = Triplet("man", "on", "grass")


def _graph(t: float, span=None) -> SceneGraph:
    i = int(t)
    return SceneGraph(triplets=(TRIPLET,), timestamp_s=t, clip_span=span or (i, i), source=SOURCE_SCRIPTED)


def _oracle(embeddings: list[np.ndarray], query: np.ndarray, k: int) -> list[int]:
    """Brute force: full sort by similarity desc, then seq_id desc."""
    def sim(v):
        try:
            return cosine_similarity(v, query)
        except ZeroVector:
            return -math.inf
    order = sorted(range(len(embeddings)), key=lambda i: (-sim(embeddings[i]), -i))
    return order[:k]


finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False, allow_infinity=False)
vectors = hnp.arrays(np.float64, 8, elements=finite)


class TestCosineSimilarity:
    def test_worked_values(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 / math.sqrt(2), abs=1e-12)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_similarity(np.zeros(3), np.ones(3))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_similarity(np.ones(3), np.ones(4))

    @given(a=vectors, b=vectors)
    @settings(max_examples=300, deadline=None)
    def test_symmetric_and_bounded(self, a, b):
        """Property: cos(a, b) = cos(b, a) and lies in [-1, 1]."""
        assume(np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6)
        ab = cosine_similarity(a, b)
        assert ab == pytest.approx(cosine_similarity(b, a), abs=1e-12)
        assert -1.0 - 1e-9 <= ab <= 1.0 + 1e-9

    @given(a=vectors, b=vectors, scale=st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=300, deadline=None)
    def test_scale_invariant(self, a, b, scale):
        """Property: cos(c * a, b) = cos(a, b) for c > 0."""
        assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
        assert cosine_similarity(scale * a, b) == pytest.approx(cosine_similarity(a, b), abs=1e-9)


class TestMeanPool:
    def test_averages_rows(self):
        assert np.array_equal(mean_pool([[1.0, 2.0], [3.0, 6.0]]), np.array([2.0, 4.0]))

    def test_single_row_is_identity(self):
        assert np.array_equal(mean_pool([[5.0, 6.0, 7.0]]), np.array([5.0, 6.0, 7.0]))

    def test_matches_double_loop(self):
        m = np.random.default_rng(3).standard_normal((7, 16))
        expected = [sum(m[i][j] for i in range(7)) / 7 for j in range(16)]
        assert np.allclose(mean_pool(m), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("bad", [[], [[]], [1.0, 2.0], [[1.0, float("nan")]]])
    def test_rejects_bad_shapes(self, bad):
        with pytest.raises(ValueError):
            mean_pool(bad)

    @given(
        data=st.data(),
        n=st.integers(min_value=1, max_value=6),
        alpha=st.floats(min_value=-2, max_value=2),
        beta=st.floats(min_value=-2, max_value=2),
    )
    @settings(max_examples=300, deadline=None)
    def test_linear(self, data, n, alpha, beta):
        """Property: pool(alpha A + beta B) = alpha pool(A) + beta pool(B)."""
        elements = st.floats(min_value=-1, max_value=1)
        a = data.draw(hnp.arrays(np.float64, (n, 8), elements=elements))
        b = data.draw(hnp.arrays(np.float64, (n, 8), elements=elements))
        combined = mean_pool(alpha * a + beta * b)
        expected = alpha * mean_pool(a) + beta * mean_pool(b)
        assert np.allclose(combined, expected, rtol=0, atol=1e-12)


class TestHashingEmbedder:
    def test_shape_and_unit_rows(self):
        m = hashing_embedder("woman in red", dim=64)
        assert m.shape == (3, 64)
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0)

    def test_deterministic(self):
        assert np.array_equal(hashing_embedder("boy next to car"), hashing_embedder("boy next to car"))

    def test_token_order_does_not_change_pooled_embedding(self):
        a = mean_pool(hashing_embedder("boy in red shirt talking with others"))
        b = mean_pool(hashing_embedder("others with talking shirt red in boy"))
        assert np.array_equal(a, b)

    def test_identical_text_similarity_one(self):
        a = mean_pool(hashing_embedder("man on grass; dog near man"))
        assert cosine_similarity(a, a) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("text", ["", "   ", "\n\t"])
    def test_empty_text(self, text):
        with pytest.raises(EmptyText):
            hashing_embedder(text)


class TestMemoryBank:
    def test_seq_ids_increase(self):
        bank = MemoryBank()
        assert [memory_append(bank, _graph(float(i)), np.ones(4)) for i in range(3)] == [0, 1, 2]
        assert len(bank) == 3
        assert bank.dim == 4

    def test_equal_timestamps_allowed(self):
        bank = MemoryBank()
        memory_append(bank, _graph(1.0), np.ones(4))
        memory_append(bank, _graph(1.0), np.ones(4))
        assert len(bank) == 2

    def test_timestamp_regression(self):
        bank = MemoryBank()
        memory_append(bank, _graph(2.0), np.ones(4))
        with pytest.raises(TimestampRegression):
            memory_append(bank, _graph(1.0), np.ones(4))

    def test_dimension_fixed_by_first_append(self):
        bank = MemoryBank()
        memory_append(bank, _graph(0.0), np.ones(4))
        with pytest.raises(DimensionMismatch):
            memory_append(bank, _graph(1.0), np.ones(5))

    def test_eviction_keeps_seq_ids_increasing(self):
        bank = MemoryBank(max_entries=2)
        for i in range(5):
            memory_append(bank, _graph(float(i)), np.ones(4) * (i + 1))
        assert [e.seq_id for e in bank.entries] == [3, 4]
        result = retrieve_top_k(bank, np.ones(4), 5)
        assert {hit.entry.seq_id for hit in result.hits} == {3, 4}

    def test_stored_embedding_is_read_only(self):
        bank = MemoryBank()
        memory_append(bank, _graph(0.0), np.ones(4))
        with pytest.raises(ValueError):
            bank.entries[0].embedding[0] = 5.0


class TestRetrieveTopK:
    def test_empty_bank(self):
        with pytest.raises(EmptyBank):
            retrieve_top_k(MemoryBank(), np.ones(4), 1)

    @pytest.mark.parametrize("k", [0, -1])
    def test_invalid_k(self, k):
        bank = MemoryBank()
        memory_append(bank, _graph(0.0), np.ones(4))
        with pytest.raises(InvalidK):
            retrieve_top_k(bank, np.ones(4), k)

    def test_query_dimension_mismatch(self):
        bank = MemoryBank()
        memory_append(bank, _graph(0.0), np.ones(4))
        with pytest.raises(DimensionMismatch):
            retrieve_top_k(bank, np.ones(3), 1)

    def test_k_larger_than_bank(self):
        bank = MemoryBank()
        for i in range(3):
            memory_append(bank, _graph(float(i)), np.array([1.0, float(i)]))
        result = retrieve_top_k(bank, np.array([1.0, 0.0]), 10)
        assert [hit.entry.seq_id for hit in result.hits] == [0, 1, 2]
        assert result.k_requested == 10

    def test_ties_prefer_recent(self):
        bank = MemoryBank()
        for i in range(4):
            memory_append(bank, _graph(float(i)), np.array([1.0, 1.0]))
        result = retrieve_top_k(bank, np.array([2.0, 2.0]), 2)
        assert [hit.entry.seq_id for hit in result.hits] == [3, 2]

    def test_zero_embedding_ranks_last(self):
        bank = MemoryBank()
        memory_append(bank, _graph(0.0), np.array([-1.0, 0.0]))
        memory_append(bank, _graph(1.0), np.zeros(2))
        result = retrieve_top_k(bank, np.array([1.0, 0.0]), 2)
        assert [hit.entry.seq_id for hit in result.hits] == [0, 1]
        assert result.summary()[1]["similarity"] is None

    def test_matches_brute_force_oracle(self):
        """1000 random (bank, query, K) instances, d = 64, banks up to 200 entries."""
        rng = np.random.default_rng(20240607)
        started = time.perf_counter()

        for _ in range(1000):
            n = int(rng.integers(1, 201))
            embeddings: list[np.ndarray] = []
            for i in range(n):
                roll = rng.random()
                if embeddings and roll < 0.15:
                    # exact duplicate of an earlier vector, forcing a similarity tie
                    embeddings.append(embeddings[int(rng.integers(len(embeddings)))].copy())
                elif roll < 0.17:
                    embeddings.append(np.zeros(64))
                else:
                    embeddings.append(rng.standard_normal(64))

            bank = MemoryBank()
            t = 0.0
            for embedding in embeddings:
                t += float(rng.integers(0, 2))
                memory_append(bank, _graph(t), embedding)

            query = rng.standard_normal(64)
            k = int(rng.integers(1, n + 6))
            result = retrieve_top_k(bank, query, k)

            assert [hit.entry.seq_id for hit in result.hits] == _oracle(embeddings, query, k)

        assert time.perf_counter() - started < 10.0
