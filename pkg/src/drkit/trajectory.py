"""Agent-tool interaction records and the operations over them.

Assistant messages use the tool-call wire format:

    <tool_call>
    {"name": "search", "arguments": {"query": ["..."]}}
    </tool_call>

PythonInterpreter calls carry their code inside the same block, right after
the JSON object, wrapped in <code></code> tags. Final answers are wrapped in
<answer></answer>. Trajectories persist as JSONL, one record per line with
fields {task, turns, final_answer, status}.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .rubric import TaskKind
from .state import STATE_HEADING, ContextState, StateValidationError, serialize_state, validate_state

TOOL_NAMES = ("search", "visit", "google_scholar", "PythonInterpreter")

# Retention thresholds for trajectory filtering (epsilon per task kind).
RETENTION_THRESHOLDS = {TaskKind.OBJECTIVE: 1.0, TaskKind.OPEN_ENDED: 0.475}

DEFAULT_MAX_TOOL_TURNS = 100

_TOOL_CALL_RE = re.compile(r"<tool_call>(.*?)</tool_call>", re.DOTALL)
_CODE_RE = re.compile(r"<code>(.*?)</code>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)

_URL_BRACKET_RE = re.compile(r"\[\s*(https?://[^\]\s]+)\s*\]")
_MARKDOWN_LINK_RE = re.compile(r"\[([^\]]+)\]\((https?://[^)\s]+)\)")
_SENTENCE_END_RE = re.compile(r"[.!?](?=\s|$)")


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"
    TOOL = "tool"


class TrajectoryStatus(str, Enum):
    ANSWERED = "answered"
    MAX_TURNS = "max_turns"
    ERROR = "error"


class MessageParseError(ValueError):
    """Assistant message violates the wire format; ``location`` says where."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class SessionSplitError(ValueError):
    """Condensation marker turn does not carry a valid state."""


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: Mapping
    code: str | None = None

    def __post_init__(self) -> None:
        if self.name not in TOOL_NAMES:
            raise ValueError(f"unknown tool {self.name!r}")
        args = self.arguments
        if self.name in ("search", "google_scholar"):
            query = args.get("query")
            if (
                not isinstance(query, list)
                or not query
                or not all(isinstance(q, str) and q for q in query)
            ):
                raise ValueError(f"{self.name} requires a non-empty list of query strings")
            if self.code is not None:
                raise ValueError(f"{self.name} does not take a code block")
        elif self.name == "visit":
            urls = args.get("url")
            if isinstance(urls, str):
                urls = [urls]
                object.__setattr__(self, "arguments", {**args, "url": urls})
            if (
                not isinstance(urls, list)
                or not urls
                or not all(isinstance(u, str) and u for u in urls)
            ):
                raise ValueError("visit requires a url string or non-empty list of urls")
            if not isinstance(args.get("goal"), str) or not args["goal"]:
                raise ValueError("visit requires a non-empty goal")
            if self.code is not None:
                raise ValueError("visit does not take a code block")
        else:  # PythonInterpreter
            if args:
                raise ValueError("PythonInterpreter arguments must be empty")
            if not self.code:
                raise ValueError("PythonInterpreter requires a non-empty code block")


@dataclass(frozen=True)
class Turn:
    role: Role
    content: str
    tool_calls: tuple[ToolCall, ...] | None = None
    condensation_marker: bool = False

    def __post_init__(self) -> None:
        if self.tool_calls is not None and self.role is not Role.ASSISTANT:
            raise ValueError("tool_calls are only valid on assistant turns")


@dataclass(frozen=True)
class Trajectory:
    task: str
    turns: tuple[Turn, ...]
    final_answer: str | None = None
    status: TrajectoryStatus = TrajectoryStatus.ANSWERED

    def __post_init__(self) -> None:
        if self.status is TrajectoryStatus.ANSWERED and self.final_answer is None:
            raise ValueError("answered trajectory requires a final_answer")


@dataclass(frozen=True)
class Session:
    """Contiguous turn slice between consecutive condensation events."""

    index: int
    prefix_state: ContextState | None
    turns: tuple[Turn, ...]


@dataclass(frozen=True)
class Citation:
    claim: str
    url: str


@dataclass(frozen=True)
class ParsedMessage:
    kind: str  # "tool_calls" | "answer" | "plain"
    tool_calls: tuple[ToolCall, ...] = ()
    answer: str | None = None
    text: str = ""


def parse_assistant_message(text: str) -> ParsedMessage:
    """Extract tool calls, a final answer, or plain text from a message."""
    answers = _ANSWER_RE.findall(text)
    blocks = list(_TOOL_CALL_RE.finditer(text))

    stripped_tags = _TOOL_CALL_RE.sub("", text)
    if "<tool_call>" in stripped_tags or "</tool_call>" in stripped_tags:
        raise MessageParseError("unbalanced <tool_call> tags", "message")
    stripped_answers = _ANSWER_RE.sub("", text)
    if len(answers) > 1 or "<answer>" in stripped_answers or "</answer>" in stripped_answers:
        raise MessageParseError("unbalanced or repeated <answer> tags", "message")

    if answers:
        return ParsedMessage(kind="answer", answer=answers[0], text=text)

    if not blocks:
        return ParsedMessage(kind="plain", text=text)

    calls = []
    for i, block in enumerate(blocks):
        calls.append(_parse_tool_call(block.group(1), f"tool_call #{i + 1}"))
    return ParsedMessage(kind="tool_calls", tool_calls=tuple(calls), text=text)


def _parse_tool_call(body: str, location: str) -> ToolCall:
    code_match = _CODE_RE.search(body)
    code = code_match.group(1) if code_match else None
    json_part = (body[: code_match.start()] + body[code_match.end():]) if code_match else body
    leftover = _CODE_RE.sub("", body)
    if "<code>" in leftover or "</code>" in leftover:
        raise MessageParseError("unbalanced <code> tags", location)
    json_part = json_part.strip()
    if not json_part:
        raise MessageParseError("empty tool call body", location)
    try:
        payload = json.loads(json_part)
    except json.JSONDecodeError as exc:
        raise MessageParseError(f"malformed JSON payload: {exc}", location) from exc
    if not isinstance(payload, Mapping):
        raise MessageParseError("tool call payload must be a JSON object", location)
    name = payload.get("name")
    if not isinstance(name, str):
        raise MessageParseError("tool call is missing a name", location)
    if "arguments" not in payload:
        raise MessageParseError("tool call is missing arguments", location)
    arguments = payload["arguments"]
    if not isinstance(arguments, Mapping):
        raise MessageParseError("arguments must be a JSON object", location)
    if name == "PythonInterpreter" and code is None:
        raise MessageParseError(
            "PythonInterpreter call has no <code> block after the JSON", location
        )
    try:
        return ToolCall(name=name, arguments=dict(arguments), code=code)
    except ValueError as exc:
        raise MessageParseError(str(exc), location) from exc


def serialize_tool_call(call: ToolCall) -> str:
    payload = json.dumps({"name": call.name, "arguments": dict(call.arguments)}, ensure_ascii=False)
    if call.code is not None:
        return f"<tool_call>\n{payload}\n<code>{call.code}</code>\n</tool_call>"
    return f"<tool_call>\n{payload}\n</tool_call>"


def serialize_message(parsed: ParsedMessage) -> str:
    """Canonical wire text for a parsed message; inverse of the parser."""
    if parsed.kind == "answer":
        return f"<answer>{parsed.answer}</answer>"
    if parsed.kind == "tool_calls":
        return "\n".join(serialize_tool_call(c) for c in parsed.tool_calls)
    return parsed.text


def split_sessions(trajectory: Trajectory) -> list[Session]:
    """Cut the trajectory at condensation markers; markers close their session."""
    sessions: list[Session] = []
    current: list[Turn] = []
    prefix: ContextState | None = None
    for turn in trajectory.turns:
        current.append(turn)
        if turn.condensation_marker:
            try:
                state = validate_state(turn.content)
            except StateValidationError as exc:
                raise SessionSplitError(
                    f"condensation marker without a valid embedded state: {exc}"
                ) from exc
            sessions.append(Session(index=len(sessions), prefix_state=prefix, turns=tuple(current)))
            current = []
            prefix = state
    sessions.append(Session(index=len(sessions), prefix_state=prefix, turns=tuple(current)))
    return sessions


def session_text(session: Session, task: str = "") -> str:
    """Training-time text of a session: optional state block plus turn contents."""
    parts = []
    if task:
        parts.append(task)
    if session.prefix_state is not None:
        parts.append(f"{STATE_HEADING}\n{serialize_state(session.prefix_state)}")
    parts.extend(turn.content for turn in session.turns)
    return "\n\n".join(parts)


def _sentence_span(text: str, start: int, end: int) -> tuple[int, int]:
    left = 0
    for m in _SENTENCE_END_RE.finditer(text, 0, start):
        left = m.end()
    right = len(text)
    m = _SENTENCE_END_RE.search(text, end)
    if m:
        right = m.end()
    return left, right


def _clean_claim(sentence: str) -> str:
    sentence = _MARKDOWN_LINK_RE.sub(lambda m: m.group(1), sentence)
    sentence = _URL_BRACKET_RE.sub("", sentence)
    sentence = re.sub(r"\s+([.!?,;:])", r"\1", sentence)
    return " ".join(sentence.split())


def extract_citations(answer: str) -> list[Citation]:
    """Deduplicated (claim, url) pairs from inline citations in the answer."""
    found: list[tuple[str, int, int]] = []
    for m in _URL_BRACKET_RE.finditer(answer):
        found.append((m.group(1), m.start(), m.end()))
    for m in _MARKDOWN_LINK_RE.finditer(answer):
        found.append((m.group(2), m.start(), m.end()))
    found.sort(key=lambda item: item[1])

    citations: list[Citation] = []
    seen: set[tuple[str, str]] = set()
    for url, start, end in found:
        left, right = _sentence_span(answer, start, end)
        claim = _clean_claim(answer[left:right])
        key = (claim, url)
        if key in seen:
            continue
        seen.add(key)
        citations.append(Citation(claim=claim, url=url))
    return citations


def filter_trajectory(score: float, kind: TaskKind | str) -> bool:
    """Retain decision: True when the score meets the kind's threshold."""
    kind = TaskKind(kind)
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    return score >= RETENTION_THRESHOLDS[kind]


def turn_to_payload(turn: Turn) -> dict:
    payload: dict = {"role": turn.role.value, "content": turn.content}
    if turn.tool_calls is not None:
        payload["tool_calls"] = [
            {"name": c.name, "arguments": dict(c.arguments)}
            | ({"code": c.code} if c.code is not None else {})
            for c in turn.tool_calls
        ]
    if turn.condensation_marker:
        payload["condensation_marker"] = True
    return payload


def turn_from_payload(payload: Mapping) -> Turn:
    tool_calls = None
    if "tool_calls" in payload:
        tool_calls = tuple(
            ToolCall(name=c["name"], arguments=c["arguments"], code=c.get("code"))
            for c in payload["tool_calls"]
        )
    return Turn(
        role=Role(payload["role"]),
        content=payload["content"],
        tool_calls=tool_calls,
        condensation_marker=bool(payload.get("condensation_marker", False)),
    )


def trajectory_to_payload(trajectory: Trajectory) -> dict:
    return {
        "task": trajectory.task,
        "turns": [turn_to_payload(t) for t in trajectory.turns],
        "final_answer": trajectory.final_answer,
        "status": trajectory.status.value,
    }


def trajectory_from_payload(payload: Mapping) -> Trajectory:
    return Trajectory(
        task=payload["task"],
        turns=tuple(turn_from_payload(t) for t in payload["turns"]),
        final_answer=payload.get("final_answer"),
        status=TrajectoryStatus(payload["status"]),
    )


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trajectory in trajectories:
            fh.write(json.dumps(trajectory_to_payload(trajectory), ensure_ascii=False))
            fh.write("\n")


def read_trajectories(path: str | Path) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield trajectory_from_payload(json.loads(line))
