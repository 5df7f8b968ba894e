"""Structured research memory: the context state and its management strategies.

The state is a strict JSON object:

    {
      "version": "dr_state",
      "search_queries":  [{"q": "...", "intent": "..."}],
      "visited_sources": [{"url": "...", "note": "..."}],
      "information_state": {
        "trusted":   [{"id": "T1", "claim": "...", "sources": [...], "reason": "..."}],
        "untrusted": [{"id": "U1", "claim": "...", "sources": [...], "reason": "..."}],
        "uncertain": [{"id": "C1", "claim": "...", "sources": [...], "reason": "...",
                       "need": "..."}]
      }
    }

No extra keys anywhere. Queries dedupe by exact ``q``, sources by exact
``url``, claims by exact ``claim`` string across all buckets with priority
trusted > untrusted > uncertain. Bucket ids are ``T``/``U``/``C`` plus a
positive integer, assigned incrementally and reused for identical claims.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

if TYPE_CHECKING:
    from .trajectory import Turn

STATE_VERSION = "dr_state"
STATE_HEADING = "RESEARCH STATE SUMMARY (prev_state)"

BUCKET_PRIORITY = ("trusted", "untrusted", "uncertain")
BUCKET_PREFIX = {"trusted": "T", "untrusted": "U", "uncertain": "C"}

_ID_RE = re.compile(r"^([TUC])([1-9][0-9]*)$")

TokenCounter = Callable[[str], int]


def default_token_counter(text: str) -> int:
    """Characters / 4, rounded up."""
    return (len(text) + 3) // 4


class StateValidationError(ValueError):
    """State document violates the schema; ``problems`` lists every issue."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class CondenserError(RuntimeError):
    """Condenser kept returning invalid state after the single retry."""


@dataclass(frozen=True)
class SearchQuery:
    q: str
    intent: str


@dataclass(frozen=True)
class VisitedSource:
    url: str
    note: str


@dataclass(frozen=True)
class ClaimEntry:
    id: str
    claim: str
    sources: tuple[str, ...]
    reason: str
    need: str | None = None


@dataclass(frozen=True)
class ContextState:
    search_queries: tuple[SearchQuery, ...] = ()
    visited_sources: tuple[VisitedSource, ...] = ()
    trusted: tuple[ClaimEntry, ...] = ()
    untrusted: tuple[ClaimEntry, ...] = ()
    uncertain: tuple[ClaimEntry, ...] = ()

    @classmethod
    def empty(cls) -> "ContextState":
        return cls()

    def bucket(self, name: str) -> tuple[ClaimEntry, ...]:
        return getattr(self, name)

    def claims(self) -> dict[str, str]:
        """Map claim string -> bucket name."""
        out: dict[str, str] = {}
        for bucket in BUCKET_PRIORITY:
            for entry in self.bucket(bucket):
                out[entry.claim] = bucket
        return out


def _check_keys(obj: Mapping, allowed: Sequence[str], where: str, problems: list[str]) -> None:
    extra = set(obj) - set(allowed)
    if extra:
        problems.append(f"{where}: unknown keys {sorted(extra)}")
    for key in allowed:
        if key == "need":
            continue
        if key not in obj:
            problems.append(f"{where}: missing key {key!r}")


def _parse_entry(
    raw: object, bucket: str, index: int, problems: list[str]
) -> ClaimEntry | None:
    where = f"information_state.{bucket}[{index}]"
    if not isinstance(raw, Mapping):
        problems.append(f"{where}: entry must be an object")
        return None
    keys = ["id", "claim", "sources", "reason"] + (["need"] if bucket == "uncertain" else [])
    _check_keys(raw, keys, where, problems)

    entry_id = raw.get("id")
    if not isinstance(entry_id, str) or not _ID_RE.match(entry_id):
        problems.append(f"{where}: id {entry_id!r} is not a valid T/U/C identifier")
    elif _ID_RE.match(entry_id).group(1) != BUCKET_PREFIX[bucket]:
        problems.append(
            f"{where}: id {entry_id!r} has the wrong prefix for bucket {bucket!r}"
        )

    claim = raw.get("claim")
    if not isinstance(claim, str) or not claim:
        problems.append(f"{where}: claim must be a non-empty string")

    sources = raw.get("sources")
    if (
        not isinstance(sources, list)
        or not sources
        or not all(isinstance(s, str) for s in sources)
    ):
        problems.append(f"{where}: sources must be a non-empty list of strings")
        sources = [s for s in sources if isinstance(s, str)] if isinstance(sources, list) else []

    reason = raw.get("reason")
    if not isinstance(reason, str):
        problems.append(f"{where}: reason must be a string")
        reason = ""

    need = None
    if bucket == "uncertain":
        need = raw.get("need")
        if not isinstance(need, str) or not need:
            problems.append(f"{where}: uncertain entry requires a non-empty need")
            need = need if isinstance(need, str) else ""

    if not isinstance(claim, str) or not isinstance(entry_id, str):
        return None
    return ClaimEntry(
        id=entry_id, claim=claim, sources=tuple(sources), reason=reason, need=need
    )


def validate_state(document: str | Mapping) -> ContextState:
    """Parse and fully validate a state document; raises with every problem found."""
    problems: list[str] = []
    if isinstance(document, Mapping):
        raw = document
    else:
        try:
            raw = json.loads(document)
        except json.JSONDecodeError as exc:
            raise StateValidationError([f"not valid JSON: {exc}"]) from exc
    if not isinstance(raw, Mapping):
        raise StateValidationError(["state must be a JSON object"])

    _check_keys(
        raw, ["version", "search_queries", "visited_sources", "information_state"],
        "state", problems,
    )
    if raw.get("version") != STATE_VERSION:
        problems.append(f"version must be {STATE_VERSION!r}, got {raw.get('version')!r}")

    queries: list[SearchQuery] = []
    seen_q: set[str] = set()
    for i, item in enumerate(raw.get("search_queries") or []):
        where = f"search_queries[{i}]"
        if not isinstance(item, Mapping):
            problems.append(f"{where}: must be an object")
            continue
        _check_keys(item, ["q", "intent"], where, problems)
        q, intent = item.get("q"), item.get("intent")
        if not isinstance(q, str) or not isinstance(intent, str):
            problems.append(f"{where}: q and intent must be strings")
            continue
        if q in seen_q:
            problems.append(f"{where}: duplicate query {q!r}")
            continue
        seen_q.add(q)
        queries.append(SearchQuery(q=q, intent=intent))

    sources: list[VisitedSource] = []
    seen_url: set[str] = set()
    for i, item in enumerate(raw.get("visited_sources") or []):
        where = f"visited_sources[{i}]"
        if not isinstance(item, Mapping):
            problems.append(f"{where}: must be an object")
            continue
        _check_keys(item, ["url", "note"], where, problems)
        url, note = item.get("url"), item.get("note")
        if not isinstance(url, str) or not isinstance(note, str):
            problems.append(f"{where}: url and note must be strings")
            continue
        if url in seen_url:
            problems.append(f"{where}: duplicate url {url!r}")
            continue
        seen_url.add(url)
        sources.append(VisitedSource(url=url, note=note))

    info = raw.get("information_state")
    buckets: dict[str, list[ClaimEntry]] = {b: [] for b in BUCKET_PRIORITY}
    if not isinstance(info, Mapping):
        problems.append("information_state must be an object")
    else:
        _check_keys(info, list(BUCKET_PRIORITY), "information_state", problems)
        seen_claims: dict[str, str] = {}
        for bucket in BUCKET_PRIORITY:
            seen_ids: set[str] = set()
            for i, item in enumerate(info.get(bucket) or []):
                entry = _parse_entry(item, bucket, i, problems)
                if entry is None:
                    continue
                if entry.id in seen_ids:
                    problems.append(
                        f"information_state.{bucket}[{i}]: duplicate id {entry.id!r}"
                    )
                seen_ids.add(entry.id)
                if entry.claim in seen_claims:
                    problems.append(
                        f"information_state.{bucket}[{i}]: claim {entry.claim!r} "
                        f"already present in {seen_claims[entry.claim]!r}"
                    )
                    continue
                seen_claims[entry.claim] = bucket
                buckets[bucket].append(entry)

    if problems:
        raise StateValidationError(problems)
    return ContextState(
        search_queries=tuple(queries),
        visited_sources=tuple(sources),
        trusted=tuple(buckets["trusted"]),
        untrusted=tuple(buckets["untrusted"]),
        uncertain=tuple(buckets["uncertain"]),
    )


def _entry_payload(entry: ClaimEntry, bucket: str) -> dict:
    payload = {
        "id": entry.id,
        "claim": entry.claim,
        "sources": list(entry.sources),
        "reason": entry.reason,
    }
    if bucket == "uncertain":
        payload["need"] = entry.need
    return payload


def state_to_payload(state: ContextState) -> dict:
    return {
        "version": STATE_VERSION,
        "search_queries": [{"q": q.q, "intent": q.intent} for q in state.search_queries],
        "visited_sources": [
            {"url": s.url, "note": s.note} for s in state.visited_sources
        ],
        "information_state": {
            bucket: [_entry_payload(e, bucket) for e in state.bucket(bucket)]
            for bucket in BUCKET_PRIORITY
        },
    }


def serialize_state(state: ContextState) -> str:
    """Canonical serialization; validate_state(serialize_state(s)) == s."""
    return json.dumps(state_to_payload(state), indent=2, ensure_ascii=False)


def _next_id(bucket: str, used: set[int]) -> str:
    n = max(used, default=0) + 1
    used.add(n)
    return f"{BUCKET_PREFIX[bucket]}{n}"


def merge_states(prev: ContextState, update: ContextState) -> ContextState:
    """Union prev and update under the exact-match dedup and priority rules."""
    queries = list(prev.search_queries)
    seen_q = {q.q for q in queries}
    for q in update.search_queries:
        if q.q not in seen_q:
            queries.append(q)
            seen_q.add(q.q)

    sources = list(prev.visited_sources)
    seen_url = {s.url for s in sources}
    for s in update.visited_sources:
        if s.url not in seen_url:
            sources.append(s)
            seen_url.add(s.url)

    prev_entries = {b: {e.claim: e for e in prev.bucket(b)} for b in BUCKET_PRIORITY}
    update_entries = {b: {e.claim: e for e in update.bucket(b)} for b in BUCKET_PRIORITY}

    rank = {b: i for i, b in enumerate(BUCKET_PRIORITY)}

    def final_bucket(claim: str) -> str:
        found = [
            b
            for b in BUCKET_PRIORITY
            if claim in prev_entries[b] or claim in update_entries[b]
        ]
        return min(found, key=rank.__getitem__)

    # Collect every occurrence of a claim (any bucket, both states) so that
    # source lists merge even across buckets.
    def occurrences(claim: str) -> list[ClaimEntry]:
        found = []
        for entries in (prev_entries, update_entries):
            for b in BUCKET_PRIORITY:
                if claim in entries[b]:
                    found.append(entries[b][claim])
        return found

    out: dict[str, list[ClaimEntry]] = {b: [] for b in BUCKET_PRIORITY}
    placed: set[str] = set()
    used_ids: dict[str, set[int]] = {b: set() for b in BUCKET_PRIORITY}
    for b in BUCKET_PRIORITY:
        for e in prev.bucket(b):
            m = _ID_RE.match(e.id)
            if m:
                used_ids[b].add(int(m.group(2)))

    def build(claim: str, bucket: str, entry_id: str) -> ClaimEntry:
        in_update = update_entries[bucket].get(claim)
        in_prev = prev_entries[bucket].get(claim)
        primary = in_update or in_prev or occurrences(claim)[0]
        merged_sources = list((in_prev or primary).sources)
        for occ in occurrences(claim):
            for src in occ.sources:
                if src not in merged_sources:
                    merged_sources.append(src)
        need = primary.need if bucket == "uncertain" else None
        return ClaimEntry(
            id=entry_id,
            claim=claim,
            sources=tuple(merged_sources),
            reason=primary.reason,
            need=need,
        )

    # Pass 1: prev entries keep their position and id when they stay put.
    for bucket in BUCKET_PRIORITY:
        for entry in prev.bucket(bucket):
            if final_bucket(entry.claim) == bucket:
                out[bucket].append(build(entry.claim, bucket, entry.id))
                placed.add(entry.claim)

    # Pass 2: claims new to their final bucket (novel, or migrated up by the
    # update) get fresh incremental ids, appended in update order.
    for bucket in BUCKET_PRIORITY:
        for entry in update.bucket(bucket):
            claim = entry.claim
            if claim in placed:
                continue
            target = final_bucket(claim)
            if target != bucket:
                continue
            out[target].append(build(claim, target, _next_id(target, used_ids[target])))
            placed.add(claim)

    return ContextState(
        search_queries=tuple(queries),
        visited_sources=tuple(sources),
        trusted=tuple(out["trusted"]),
        untrusted=tuple(out["untrusted"]),
        uncertain=tuple(out["uncertain"]),
    )


def should_condense(context_tokens: int, threshold: int) -> bool:
    """True once usage strictly exceeds the threshold."""
    if context_tokens < 0:
        raise ValueError("context_tokens must be nonnegative")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return context_tokens > threshold


@dataclass(frozen=True)
class Strategy:
    """Context management strategy: condense, discard_all, or keep_last_n."""

    kind: str
    n: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("condense", "discard_all", "keep_last_n"):
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "keep_last_n":
            if self.n is None or self.n < 1:
                raise ValueError("keep_last_n requires n >= 1")
        elif self.n is not None:
            raise ValueError(f"strategy {self.kind!r} takes no n")

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        text = text.strip()
        if text == "condense":
            return CONDENSE
        if text in ("discard-all", "discard_all"):
            return DISCARD_ALL
        m = re.match(r"^keep[-_]last[-_]n=(\d+)$", text)
        if m:
            return cls("keep_last_n", int(m.group(1)))
        raise ValueError(f"unknown strategy {text!r}")


CONDENSE = Strategy("condense")
DISCARD_ALL = Strategy("discard_all")


def keep_last_n(n: int) -> Strategy:
    return Strategy("keep_last_n", n)


# Condenser contract: (history turns, previous state or None) -> serialized
# state text. Invalid output is re-requested exactly once.
Condenser = Callable[[Sequence["Turn"], "ContextState | None"], str]


@dataclass(frozen=True)
class WorkingContext:
    """What the agent sees after a context reset: task, optional state, live turns."""

    task: str
    state: ContextState | None = None
    turns: tuple = ()

    def content_tokens(self, counter: TokenCounter = default_token_counter) -> int:
        """Dynamic content only: task, serialized state, turn contents."""
        total = counter(self.task)
        if self.state is not None:
            total += counter(serialize_state(self.state))
        for turn in self.turns:
            total += counter(turn.content)
        return total

    def prompt_prefix(self) -> str:
        if self.state is None:
            return self.task
        return (
            f"{self.task}\n\n{STATE_HEADING}\n{serialize_state(self.state)}"
        )

    def with_turn(self, turn) -> "WorkingContext":
        return replace(self, turns=self.turns + (turn,))


def apply_strategy(
    task: str,
    history: Sequence["Turn"],
    strategy: Strategy,
    condenser: Condenser | None = None,
    prev_state: ContextState | None = None,
) -> WorkingContext:
    """Build the fresh working context that replaces ``history``."""
    if not history:
        raise ValueError("history must be non-empty")

    if strategy.kind == "discard_all":
        return WorkingContext(task=task)
    if strategy.kind == "keep_last_n":
        kept = tuple(history[-strategy.n:]) if strategy.n < len(history) else tuple(history)
        return WorkingContext(task=task, turns=kept)

    if condenser is None:
        raise ValueError("condense strategy requires a condenser")
    last_error: StateValidationError | None = None
    for _ in range(2):
        text = condenser(history, prev_state)
        try:
            update = validate_state(text)
        except StateValidationError as exc:
            last_error = exc
            continue
        merged = merge_states(prev_state or ContextState.empty(), update)
        return WorkingContext(task=task, state=merged)
    raise CondenserError(
        f"condenser returned invalid state twice: {last_error}"
    )
