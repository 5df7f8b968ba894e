import struct
import threading

import numpy as np
import pytest

from drkit.cache import (
    CacheError,
    ExactCosineIndex,
    SearchCache,
    ToolCache,
    VisitCache,
    cosine_similarity,
    hashing_embedder,
)


def vector_embedder(table):
    """Deterministic mock: query -> preset vector; unknown queries get zeros."""

    def embed(text):
        return table[text]

    return embed


@pytest.fixture()
def cache_dir(tmp_path):
    return tmp_path / "cache"


class TestSearchCache:
    def test_read_your_writes_exact(self, cache_dir):
        table = {"q1": [1.0, 0.0], "q2": [0.0, 1.0]}
        cache = SearchCache(cache_dir / "search.log")
        cache.store("q1", {"hits": [1, 2]}, vector_embedder(table))
        outcome = cache.lookup("q1", 0.9, vector_embedder(table))
        assert outcome.kind == "exact_hit"
        assert outcome.results == {"hits": [1, 2]}
        cache.close()

    def test_persistence_across_reopen(self, cache_dir):
        table = {"q1": [1.0, 0.0]}
        cache = SearchCache(cache_dir / "search.log")
        cache.store("q1", {"payload": "x"}, vector_embedder(table))
        cache.close()
        reopened = SearchCache(cache_dir / "search.log")
        outcome = reopened.lookup("q1", 0.9, vector_embedder(table))
        assert outcome.kind == "exact_hit"
        assert outcome.results == {"payload": "x"}
        reopened.close()

    def test_semantic_hit_above_threshold(self, cache_dir):
        table = {
            "cached query": [1.0, 0.0],
            "similar query": [0.95, float(np.sqrt(1 - 0.95**2))],
        }
        cache = SearchCache(cache_dir / "s.log")
        cache.store("cached query", "results!", vector_embedder(table))
        outcome = cache.lookup("similar query", 0.9, vector_embedder(table))
        assert outcome.kind == "semantic_hit"
        assert outcome.similarity == pytest.approx(0.95)
        assert outcome.proxy_query == "cached query"
        assert outcome.results == "results!"
        cache.close()

    def test_semantic_below_threshold_misses(self, cache_dir):
        table = {"a": [1.0, 0.0], "b": [0.5, float(np.sqrt(0.75))]}
        cache = SearchCache(cache_dir / "s.log")
        cache.store("a", "ra", vector_embedder(table))
        assert cache.lookup("b", 0.9, vector_embedder(table)).kind == "miss"
        cache.close()

    def test_empty_cache_misses(self, cache_dir):
        cache = SearchCache(cache_dir / "s.log")
        assert cache.lookup("novel", 0.9, vector_embedder({"novel": [1.0, 0.0]})).kind == "miss"
        cache.close()

    def test_overwrite_latest_wins(self, cache_dir):
        table = {"q": [1.0, 0.0]}
        cache = SearchCache(cache_dir / "s.log")
        cache.store("q", "first", vector_embedder(table))
        cache.store("q", "second", vector_embedder(table))
        assert cache.lookup("q", 0.9, vector_embedder(table)).results == "second"
        cache.close()
        reopened = SearchCache(cache_dir / "s.log")
        assert reopened.lookup("q", 0.9, vector_embedder(table)).results == "second"
        assert reopened.stats()["entries"] == 1
        reopened.close()

    def test_empty_query_rejected(self, cache_dir):
        cache = SearchCache(cache_dir / "s.log")
        with pytest.raises(CacheError):
            cache.store("", "x", vector_embedder({"": [1.0]}))
        cache.close()

    def test_embedder_failure_surfaces(self, cache_dir):
        def broken(text):
            raise RuntimeError("embedding service down")

        table = {"a": [1.0, 0.0]}
        cache = SearchCache(cache_dir / "s.log")
        cache.store("a", "ra", vector_embedder(table))
        with pytest.raises(RuntimeError, match="embedding service down"):
            cache.lookup("b", 0.9, broken)
        cache.close()

    def test_dimension_mismatch_rejected(self, cache_dir):
        cache = SearchCache(cache_dir / "s.log")
        cache.store("a", "ra", vector_embedder({"a": [1.0, 0.0]}))
        with pytest.raises(CacheError, match="dimension"):
            cache.store("b", "rb", vector_embedder({"b": [1.0, 0.0, 0.0]}))
        cache.close()

    def test_threshold_one_with_exact_preserving_embedder(self, cache_dir):
        embedder = hashing_embedder(32)
        cache = SearchCache(cache_dir / "s.log")
        for i in range(20):
            cache.store(f"query {i}", f"r{i}", embedder)
        # distinct queries map to non-parallel vectors: no semantic hit at 1.0
        for i in range(20):
            assert cache.lookup(f"other {i}", 1.0, embedder).kind == "miss"
        # identical query still hits via the exact layer
        assert cache.lookup("query 3", 1.0, embedder).kind == "exact_hit"
        cache.close()

    def test_semantic_hit_iff_cosine_above_threshold(self, cache_dir):
        rng = np.random.default_rng(17)
        dim = 16
        stored = {f"s{i}": rng.standard_normal(dim) for i in range(200)}
        probes = {f"p{i}": rng.standard_normal(dim) for i in range(200)}
        table = {k: list(v) for k, v in (stored | probes).items()}
        cache = SearchCache(cache_dir / "s.log")
        for key in stored:
            cache.store(key, f"results {key}", vector_embedder(table))
        threshold = 0.35
        for key, vec in probes.items():
            best = max(
                (cosine_similarity(np.asarray(vec), np.asarray(table[s])) for s in stored)
            )
            outcome = cache.lookup(key, threshold, vector_embedder(table))
            if best >= threshold:
                assert outcome.kind == "semantic_hit"
                assert outcome.similarity == pytest.approx(best, abs=1e-12)
                assert outcome.similarity >= threshold
            else:
                assert outcome.kind == "miss"
        cache.close()

    def test_stats_counters(self, cache_dir):
        table = {"a": [1.0, 0.0], "near-a": [0.99, float(np.sqrt(1 - 0.99**2))], "far": [0.0, 1.0]}
        cache = SearchCache(cache_dir / "s.log")
        cache.store("a", "ra", vector_embedder(table))
        cache.lookup("a", 0.9, vector_embedder(table))
        cache.lookup("near-a", 0.9, vector_embedder(table))
        cache.lookup("far", 0.9, vector_embedder(table))
        stats = cache.stats()
        assert stats == {"entries": 1, "exact_hits": 1, "semantic_hits": 1, "misses": 1}
        cache.close()

    def test_truncated_tail_dropped_on_open(self, cache_dir):
        table = {"q": [1.0, 0.0]}
        path = cache_dir / "s.log"
        cache = SearchCache(path)
        cache.store("q", "safe", vector_embedder(table))
        cache.close()
        with open(path, "ab") as fh:
            fh.write(struct.pack(">I", 9999))
            fh.write(b"torn")
        reopened = SearchCache(path)
        assert reopened.lookup("q", 0.9, vector_embedder(table)).results == "safe"
        assert reopened.stats()["entries"] == 1
        reopened.close()
        # compaction rewrote a clean log
        again = SearchCache(path)
        assert again.stats()["entries"] == 1
        again.close()

    def test_invalid_threshold_rejected(self, cache_dir):
        cache = SearchCache(cache_dir / "s.log")
        with pytest.raises(CacheError):
            cache.lookup("q", 0.0, vector_embedder({"q": [1.0]}))
        with pytest.raises(CacheError):
            cache.lookup("q", 1.5, vector_embedder({"q": [1.0]}))
        cache.close()


class TestVisitCache:
    def test_exact_hit_and_miss(self, cache_dir):
        cache = VisitCache(cache_dir / "v.log")
        cache.store("https://a/b", "<html>content</html>")
        hit = cache.lookup("https://a/b")
        assert hit is not None
        assert hit.content == "<html>content</html>"
        assert cache.lookup("https://a/c") is None
        cache.close()

    def test_fragment_variant_misses(self, cache_dir):
        cache = VisitCache(cache_dir / "v.log")
        cache.store("https://a/b", "x")
        assert cache.lookup("https://a/b#frag") is None
        assert cache.lookup("https://a/b/") is None
        cache.close()

    def test_persistence_roundtrip(self, cache_dir):
        cache = VisitCache(cache_dir / "v.log")
        cache.store("https://a/b", {"page": "data"})
        cache.close()
        reopened = VisitCache(cache_dir / "v.log")
        hit = reopened.lookup("https://a/b")
        assert hit.content == {"page": "data"}
        reopened.close()

    def test_empty_url_rejected(self, cache_dir):
        cache = VisitCache(cache_dir / "v.log")
        with pytest.raises(CacheError):
            cache.store("", "x")
        cache.close()


class TestConcurrency:
    def test_concurrent_lookups_never_torn(self, cache_dir):
        dim = 8
        rng = np.random.default_rng(5)
        table = {f"q{i}": list(rng.standard_normal(dim)) for i in range(50)}
        embedder = vector_embedder(table)
        cache = SearchCache(cache_dir / "s.log")
        payload_a = {"version": "a", "check": "a" * 50}
        payload_b = {"version": "b", "check": "b" * 50}
        cache.store("q0", payload_a, embedder)
        errors = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                outcome = cache.lookup("q0", 0.5, embedder)
                if outcome.results not in (payload_a, payload_b):
                    errors.append(outcome.results)

        def writer():
            for i in range(200):
                cache.store("q0", payload_a if i % 2 else payload_b, embedder)
                cache.store(f"q{i % 50}", payload_a, embedder)
            stop.set()

        threads = [threading.Thread(target=reader) for _ in range(4)]
        writer_thread = threading.Thread(target=writer)
        for t in threads + [writer_thread]:
            t.start()
        for t in threads + [writer_thread]:
            t.join(timeout=30)
        assert not errors
        cache.close()


class TestToolCache:
    def test_bundles_both_layers(self, cache_dir):
        tool_cache = ToolCache(cache_dir)
        embedder = hashing_embedder(16)
        tool_cache.search.store("q", "r", embedder)
        tool_cache.visit.store("https://a", "c")
        stats = tool_cache.stats()
        assert stats["search"]["entries"] == 1
        assert stats["visit"]["entries"] == 1
        tool_cache.close()
        reopened = ToolCache(cache_dir)
        assert reopened.visit.lookup("https://a").content == "c"
        reopened.close()

    def test_cosine_zero_norm_is_zero(self):
        assert cosine_similarity(np.zeros(3), np.ones(3)) == 0.0

    def test_index_nearest_on_empty_is_none(self):
        assert ExactCosineIndex().nearest(np.ones(3)) is None
