"""Single-episode agent runtime: prompt assembly, tool dispatch, termination.

Every model role is injected: the policy is a callable from prompt text to
assistant text, the visit summarizer turns (page content, goal) into a
three-field digest, the interpreter runs code, and live search/fetch clients
sit behind the cache. Tool observations are framed in
``<tool_response>...</tool_response>`` and appended to the working context;
once the context's dynamic tokens exceed the configured threshold the
episode's strategy resets the working context (recording a condensation
marker turn when the condense strategy produced a new state).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .cache import Embedder, ToolCache
from .state import (
    CONDENSE,
    Condenser,
    ContextState,
    Strategy,
    TokenCounter,
    WorkingContext,
    apply_strategy,
    default_token_counter,
    serialize_state,
    should_condense,
)
from .trajectory import (
    DEFAULT_MAX_TOOL_TURNS,
    MessageParseError,
    Role,
    ToolCall,
    Trajectory,
    TrajectoryStatus,
    Turn,
    parse_assistant_message,
)

PolicyInterface = Callable[[str], str]
Summarizer = Callable[[object, str], Mapping]
LiveSearchClient = Callable[[str], object]
LiveFetchClient = Callable[[str], object]
Interpreter = Callable[[str], str]

DEFAULT_CONTEXT_THRESHOLD = 16384
DEFAULT_SEMANTIC_THRESHOLD = 0.9

TOOL_DECLARATIONS = """<tools>
{"type": "function", "function": {"name": "search", "description": "Perform Google web searches then returns a string of the top search results. Accepts multiple queries.", "parameters": {"type": "object", "properties": {"query": {"type": "array", "items": {"type": "string", "description": "The search query."}, "minItems": 1, "description": "The list of search queries."}}, "required": ["query"]}}}
{"type": "function", "function": {"name": "visit", "description": "Visit webpage(s) and return the summary of the content.", "parameters": {"type": "object", "properties": {"url": {"type": "array", "items": {"type": "string"}, "description": "The URL(s) of the webpage(s) to visit. Can be a single URL or an array of URLs."}, "goal": {"type": "string", "description": "The specific information goal for visiting webpage(s)."}}, "required": ["url", "goal"]}}}
{"type": "function", "function": {"name": "google_scholar", "description": "Leverage Google Scholar to retrieve relevant information from academic publications. Accepts multiple queries. This tool will also return results from google search", "parameters": {"type": "object", "properties": {"query": {"type": "array", "items": {"type": "string", "description": "The search query."}, "minItems": 1, "description": "The list of search queries for Google Scholar."}}, "required": ["query"]}}}
{"type": "function", "function": {"name": "PythonInterpreter", "description": "Executes Python code in a sandboxed environment. The 'arguments' JSON object must be empty: {}. The Python code to be executed must be placed immediately after the JSON block, enclosed within <code> and </code> tags. Any output you want to see MUST be printed to standard output using the print() function.", "parameters": {"type": "object", "properties": {}}}}
</tools>"""

SYSTEM_PROMPT_TEMPLATE = """You are a deep research assistant. Your core function is to conduct thorough, multi-source investigations into any topic. You must handle both broad, open-domain inquiries and queries within specialized academic fields. For every request, synthesize information from credible, diverse sources to deliver a comprehensive, accurate, and objective response. When you have gathered sufficient information and are ready to provide the definitive response, you must enclose the entire final answer within <answer></answer> tags.

# Tools

You may call one or more functions to assist with the user query.

You are provided with function signatures within <tools></tools> XML tags:
{tool_declarations}

# Using prev_state (Research State Summary)

If you see a "RESEARCH STATE SUMMARY (prev_state)" section in the user message, it contains a compressed summary of previous research progress. Use it to:

1. Avoid redundant work: check `search_queries` and `visited_sources` before repeating searches or visits.
2. Use verified information: `information_state.trusted` holds facts already verified from visited sources; `information_state.untrusted` holds claims that were contradicted or proven unreliable.
3. Follow up on uncertain information: `information_state.uncertain` lists claims that need more evidence, and each `need` field specifies the exact next action.

Do NOT search for or visit information that is already in `prev_state` unless it is insufficient to answer the user's question. The final answer must exclude any information that remains uncertain or pending.

For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:
<tool_call>
{{"name": <function-name>, "arguments": <args-json-object>}}
</tool_call>

Current date: {current_date}"""


class PolicyError(RuntimeError):
    """Policy invocation failed; the episode ends with a partial trajectory."""


@dataclass(frozen=True)
class AgentConfig:
    max_turns: int = DEFAULT_MAX_TOOL_TURNS
    context_threshold_tokens: int = DEFAULT_CONTEXT_THRESHOLD
    strategy: Strategy = CONDENSE
    current_date: str = ""

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be positive")
        if self.context_threshold_tokens < 1:
            raise ValueError("context_threshold_tokens must be positive")


@dataclass
class ToolRegistry:
    """Dispatch table from tool name to observation-producing handler."""

    handlers: dict[str, Callable[[ToolCall], str]] = field(default_factory=dict)

    def register(self, name: str, handler: Callable[[ToolCall], str]) -> None:
        self.handlers[name] = handler

    def names(self) -> tuple[str, ...]:
        return tuple(self.handlers)


def build_prompt(task: str, prev_state: ContextState | None, config: AgentConfig) -> str:
    """System prompt (tool schemas, date) plus the user block with optional state."""
    if not task:
        raise ValueError("task must be non-empty")
    system = SYSTEM_PROMPT_TEMPLATE.format(
        tool_declarations=TOOL_DECLARATIONS, current_date=config.current_date
    )
    user = WorkingContext(task=task, state=prev_state).prompt_prefix()
    return f"{system}\n\n{user}"


def dispatch_tool(call: ToolCall, registry: ToolRegistry) -> str:
    """Run the handler for a parsed call; failures become error observations."""
    handler = registry.handlers.get(call.name)
    if handler is None:
        return f"Error: tool {call.name!r} is not available."
    try:
        return handler(call)
    except Exception as exc:  # tool faults must not kill the episode
        return f"Error: tool {call.name!r} failed: {exc}"


def _search_handler(
    cache: ToolCache,
    live: LiveSearchClient,
    embedder: Embedder,
    threshold: float,
) -> Callable[[ToolCall], str]:
    def handle(call: ToolCall) -> str:
        blocks = []
        for query in call.arguments["query"]:
            outcome = cache.search.lookup(query, threshold, embedder)
            if outcome.is_hit:
                results = outcome.results
            else:
                results = live(query)
                cache.search.store(query, results, embedder)
            blocks.append(f"Results for {query!r}:\n{_as_text(results)}")
        return "\n\n".join(blocks)

    return handle


def _visit_handler(
    cache: ToolCache, fetch: LiveFetchClient, summarizer: Summarizer
) -> Callable[[ToolCall], str]:
    def handle(call: ToolCall) -> str:
        goal = call.arguments["goal"]
        blocks = []
        for url in call.arguments["url"]:
            cached = cache.visit.lookup(url)
            if cached is not None:
                content = cached.content
            else:
                content = fetch(url)
                cache.visit.store(url, content)
            digest = summarizer(content, goal)
            blocks.append(f"Summary of {url}:\n{json.dumps(dict(digest), ensure_ascii=False)}")
        return "\n\n".join(blocks)

    return handle


def _as_text(payload: object) -> str:
    if isinstance(payload, str):
        return payload
    return json.dumps(payload, ensure_ascii=False)


def build_default_registry(
    cache: ToolCache,
    live_search: LiveSearchClient,
    live_fetch: LiveFetchClient,
    summarizer: Summarizer,
    interpreter: Interpreter,
    embedder: Embedder,
    semantic_threshold: float = DEFAULT_SEMANTIC_THRESHOLD,
    live_scholar: LiveSearchClient | None = None,
) -> ToolRegistry:
    """Wire the four standard tools: caches in front, live clients behind."""
    registry = ToolRegistry()
    registry.register("search", _search_handler(cache, live_search, embedder, semantic_threshold))
    registry.register(
        "google_scholar",
        _search_handler(cache, live_scholar or live_search, embedder, semantic_threshold),
    )
    registry.register("visit", _visit_handler(cache, live_fetch, summarizer))
    registry.register("PythonInterpreter", lambda call: interpreter(call.code))
    return registry


def _observation_turn(text: str) -> Turn:
    return Turn(role=Role.TOOL, content=f"<tool_response>\n{text}\n</tool_response>")


class ScriptedPolicy:
    """Replays a fixed message sequence; deterministic by construction.

    One instance drives one episode. ``clone()`` hands out a fresh replay of
    the same script, which is how the pipeline gives each rollout its own
    policy state.
    """

    def __init__(self, messages: Sequence[str]):
        if not messages:
            raise ValueError("scripted policy needs at least one message")
        self._messages = tuple(messages)
        self._position = 0
        self.prompts: list[str] = []

    def __call__(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if self._position >= len(self._messages):
            raise PolicyError("scripted policy ran out of messages")
        message = self._messages[self._position]
        self._position += 1
        return message

    def clone(self) -> "ScriptedPolicy":
        return ScriptedPolicy(self._messages)


def run_episode(
    task: str,
    policy: PolicyInterface,
    registry: ToolRegistry,
    config: AgentConfig | None = None,
    condenser: Condenser | None = None,
    token_counter: TokenCounter = default_token_counter,
) -> Trajectory:
    """Drive one research episode to answer, turn cap, or policy error."""
    config = config or AgentConfig()
    if config.strategy.kind == "condense" and condenser is None:
        raise ValueError("condense strategy requires a condenser")

    turns: list[Turn] = []
    context = WorkingContext(task=task)
    assistant_turns = 0

    def record(turn: Turn) -> None:
        nonlocal context
        turns.append(turn)
        context = context.with_turn(turn)

    def condense_if_needed() -> None:
        # Checked after every appended observation.
        nonlocal context
        tokens = context.content_tokens(token_counter)
        if not should_condense(tokens, config.context_threshold_tokens):
            return
        new_context = apply_strategy(
            task, context.turns, config.strategy,
            condenser=condenser, prev_state=context.state,
        )
        if config.strategy.kind == "condense":
            # Marker belongs to the trajectory record, never the fresh context.
            turns.append(
                Turn(
                    role=Role.USER,
                    content=serialize_state(new_context.state),
                    condensation_marker=True,
                )
            )
        context = new_context

    while True:
        if assistant_turns >= config.max_turns:
            return Trajectory(
                task=task, turns=tuple(turns), final_answer=None,
                status=TrajectoryStatus.MAX_TURNS,
            )

        prompt = build_prompt(task, context.state, config)
        if context.turns:
            prompt += "\n\n" + "\n\n".join(t.content for t in context.turns)
        try:
            message = policy(prompt)
        except Exception:
            return Trajectory(
                task=task, turns=tuple(turns), final_answer=None,
                status=TrajectoryStatus.ERROR,
            )

        try:
            parsed = parse_assistant_message(message)
        except MessageParseError as exc:
            assistant_turns += 1
            record(Turn(role=Role.ASSISTANT, content=message))
            record(_observation_turn(f"Error: malformed tool call: {exc}"))
            condense_if_needed()
            continue

        if parsed.kind == "answer":
            record(Turn(role=Role.ASSISTANT, content=message))
            return Trajectory(
                task=task, turns=tuple(turns), final_answer=parsed.answer,
                status=TrajectoryStatus.ANSWERED,
            )

        assistant_turns += 1
        if parsed.kind == "plain":
            record(Turn(role=Role.ASSISTANT, content=message))
            continue

        record(Turn(role=Role.ASSISTANT, content=message, tool_calls=parsed.tool_calls))
        for call in parsed.tool_calls:
            observation = dispatch_tool(call, registry)
            record(_observation_turn(observation))
            condense_if_needed()
