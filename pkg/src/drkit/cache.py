"""Persistent dual-layer cache for search/scholar and visit tool traffic.

Search queries hit an exact-match index first, then fall back to a cosine
similarity scan over cached query embeddings; visits are exact-URL only,
keyed by the verbatim URL string. Nothing here talks to the network; live
clients are injected at the runtime layer.

On-disk layout: one append-only log per cache (``search.log``,
``visit.log``). Each record is a 4-byte big-endian length prefix followed by
that many bytes of UTF-8 JSON. The in-memory index is rebuilt by replaying
the log on open (last writer wins per key); a truncated or undecodable tail
is dropped and the file compacted. Duplicate keys are also compacted away on
open.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

Embedder = Callable[[str], Sequence[float]]

_LEN_STRUCT = struct.Struct(">I")


class CacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchCacheEntry:
    query: str
    results: object
    embedding: tuple[float, ...]
    stored_at: float


@dataclass(frozen=True)
class VisitCacheEntry:
    url: str
    content: object
    stored_at: float


@dataclass(frozen=True)
class LookupOutcome:
    kind: str  # "exact_hit" | "semantic_hit" | "miss"
    results: object = None
    similarity: float | None = None
    proxy_query: str | None = None

    @classmethod
    def exact_hit(cls, results: object) -> "LookupOutcome":
        return cls(kind="exact_hit", results=results)

    @classmethod
    def semantic_hit(cls, results: object, similarity: float, proxy_query: str) -> "LookupOutcome":
        return cls(
            kind="semantic_hit", results=results, similarity=similarity, proxy_query=proxy_query
        )

    @classmethod
    def miss(cls) -> "LookupOutcome":
        return cls(kind="miss")

    @property
    def is_hit(self) -> bool:
        return self.kind != "miss"


def _read_log(path: Path) -> tuple[list[dict], bool]:
    """Replay the log; returns (records, tail_was_dirty)."""
    records: list[dict] = []
    if not path.exists():
        return records, False
    data = path.read_bytes()
    offset = 0
    dirty = False
    while offset < len(data):
        if offset + _LEN_STRUCT.size > len(data):
            dirty = True
            break
        (length,) = _LEN_STRUCT.unpack_from(data, offset)
        start = offset + _LEN_STRUCT.size
        end = start + length
        if end > len(data):
            dirty = True
            break
        try:
            records.append(json.loads(data[start:end].decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError):
            dirty = True
            break
        offset = end
    return records, dirty


def _encode_record(payload: dict) -> bytes:
    body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
    return _LEN_STRUCT.pack(len(body)) + body


class _LogStore:
    """Shared append-only log machinery; subclass-agnostic key/value records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        records, dirty = _read_log(self.path)
        self._records: dict[str, dict] = {}
        for record in records:
            self._records[record["key"]] = record
        if dirty or len(records) != len(self._records):
            self._compact()
        self._fh = open(self.path, "ab")

    def _compact(self) -> None:
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            for record in self._records.values():
                fh.write(_encode_record(record))
        os.replace(tmp, self.path)

    def append(self, record: dict) -> None:
        with self._lock:
            self._fh.write(_encode_record(record))
            self._fh.flush()
            self._records[record["key"]] = record

    def get(self, key: str) -> dict | None:
        return self._records.get(key)

    def snapshot(self) -> list[dict]:
        return list(self._records.values())

    def __len__(self) -> int:
        return len(self._records)

    def close(self) -> None:
        with self._lock:
            self._fh.close()


class _Counters:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.exact_hits = 0
        self.semantic_hits = 0
        self.misses = 0

    def bump(self, field: str) -> None:
        with self._lock:
            setattr(self, field, getattr(self, field) + 1)


def hashing_embedder(dimension: int) -> Embedder:
    """Deterministic, network-free embedder: hashes text to a unit vector.

    Distinct strings land in near-orthogonal directions, so the semantic
    layer stays functional but never produces spurious hits. Meant for
    offline runs and tests, not for real similarity.
    """

    def embed(text: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
        rng = np.random.default_rng(seed)
        vector = rng.standard_normal(dimension)
        return vector / np.linalg.norm(vector)

    return embed


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class ExactCosineIndex:
    """Exhaustive cosine scan over a lazily stacked matrix. Swap in an ANN
    index behind the same interface if the cache outgrows a desk."""

    def __init__(self) -> None:
        self._rows: dict[str, int] = {}
        self._keys: list[str] = []
        self._vectors: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None

    def add(self, key: str, vector: np.ndarray) -> None:
        row = self._rows.get(key)
        if row is not None:
            self._vectors[row] = vector
        else:
            self._vectors.append(vector)
            self._keys.append(key)
            self._rows[key] = len(self._keys) - 1
        self._matrix = None

    def nearest(self, vector: np.ndarray) -> tuple[str, float] | None:
        keys = list(self._keys)
        if not keys:
            return None
        if self._matrix is None or self._matrix.shape[0] != len(keys):
            vectors = list(self._vectors)[: len(keys)]
            self._matrix = np.vstack(vectors)
            self._norms = np.linalg.norm(self._matrix, axis=1)
        matrix, norms = self._matrix, self._norms
        vnorm = float(np.linalg.norm(vector))
        if vnorm == 0.0:
            sims = np.zeros(len(keys))
        else:
            denom = norms * vnorm
            safe = np.where(denom == 0.0, 1.0, denom)
            sims = np.where(denom == 0.0, 0.0, (matrix @ vector) / safe)
        best = int(np.argmax(sims))
        return keys[best], float(sims[best])


class SearchCache:
    """Exact + semantic cache for search/scholar responses."""

    def __init__(self, path: str | Path, dimension: int | None = None):
        self._store = _LogStore(path)
        self._dimension = dimension
        self._counters = _Counters()
        self._index = ExactCosineIndex()
        for record in self._store.snapshot():
            vector = np.asarray(record["embedding"], dtype=np.float64)
            if self._dimension is None:
                self._dimension = vector.size
            self._index.add(record["key"], vector)

    def _check_dimension(self, vector: np.ndarray, query: str) -> None:
        if self._dimension is None:
            self._dimension = vector.size
        elif vector.size != self._dimension:
            raise CacheError(
                f"embedding for {query!r} has dimension {vector.size}, "
                f"cache is configured for {self._dimension}"
            )

    def lookup(self, query: str, threshold: float, embedder: Embedder) -> LookupOutcome:
        """Exact match first, then nearest cached query at cosine >= threshold."""
        if not 0.0 < threshold <= 1.0:
            raise CacheError(f"threshold {threshold} outside (0, 1]")
        record = self._store.get(query)
        if record is not None:
            self._counters.bump("exact_hits")
            return LookupOutcome.exact_hit(record["results"])

        vector = np.asarray(embedder(query), dtype=np.float64)
        self._check_dimension(vector, query)
        nearest = self._index.nearest(vector)
        if nearest is not None and nearest[1] >= threshold:
            proxy, similarity = nearest[0], nearest[1]
            proxy_record = self._store.get(proxy)
            if proxy_record is not None:
                self._counters.bump("semantic_hits")
                return LookupOutcome.semantic_hit(
                    proxy_record["results"], similarity, proxy
                )
        self._counters.bump("misses")
        return LookupOutcome.miss()

    def store(self, query: str, results: object, embedder: Embedder) -> SearchCacheEntry:
        if not query:
            raise CacheError("cannot cache an empty query")
        vector = np.asarray(embedder(query), dtype=np.float64)
        self._check_dimension(vector, query)
        entry = SearchCacheEntry(
            query=query,
            results=results,
            embedding=tuple(float(x) for x in vector),
            stored_at=time.time(),
        )
        self._store.append(
            {
                "key": query,
                "results": results,
                "embedding": list(entry.embedding),
                "stored_at": entry.stored_at,
            }
        )
        self._index.add(query, vector)
        return entry

    def stats(self) -> dict:
        return {
            "entries": len(self._store),
            "exact_hits": self._counters.exact_hits,
            "semantic_hits": self._counters.semantic_hits,
            "misses": self._counters.misses,
        }

    def close(self) -> None:
        self._store.close()


class VisitCache:
    """Exact-URL cache for page content; a miss never triggers a fetch here."""

    def __init__(self, path: str | Path):
        self._store = _LogStore(path)
        self._counters = _Counters()

    def lookup(self, url: str) -> VisitCacheEntry | None:
        record = self._store.get(url)
        if record is None:
            self._counters.bump("misses")
            return None
        self._counters.bump("exact_hits")
        return VisitCacheEntry(url=url, content=record["content"], stored_at=record["stored_at"])

    def store(self, url: str, content: object) -> VisitCacheEntry:
        if not url:
            raise CacheError("cannot cache an empty url")
        entry = VisitCacheEntry(url=url, content=content, stored_at=time.time())
        self._store.append({"key": url, "content": content, "stored_at": entry.stored_at})
        return entry

    def stats(self) -> dict:
        return {
            "entries": len(self._store),
            "exact_hits": self._counters.exact_hits,
            "semantic_hits": 0,
            "misses": self._counters.misses,
        }

    def close(self) -> None:
        self._store.close()


class ToolCache:
    """One directory holding both cache logs; share a handle across workers."""

    def __init__(self, directory: str | Path, dimension: int | None = None):
        self.directory = Path(directory)
        self.search = SearchCache(self.directory / "search.log", dimension=dimension)
        self.visit = VisitCache(self.directory / "visit.log")

    def stats(self) -> dict:
        return {"search": self.search.stats(), "visit": self.visit.stats()}

    def close(self) -> None:
        self.search.close()
        self.visit.close()
