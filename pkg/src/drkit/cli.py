"""Command-line front end. Every subcommand is a thin shell over one module
operation: inputs come from files, the machine-readable report goes to --out
(or stdout when --out is omitted), and stdout carries a one-line summary.

Exit codes: 0 success, 1 semantic validation failure (report still written),
2 bad paths, flags, or runtime errors.

Episodes and pipelines run fully offline: the policy is a scripted mock
(``--policy mock:messages.json``), cache misses return placeholder text, and
the condenser is a deterministic stub that collects queries and visited URLs
from the current window. Real model and network clients are injected only
through the library API.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from . import plots
from .cache import ToolCache, hashing_embedder
from .pipeline import EvalReport, PipelineConfig, RolloutPipeline
from .rewards import (
    CitationLabel,
    FactLabel,
    RewardRecord,
    RolloutGroup,
    calibrate_open_ended,
    combine,
    fact_reward,
    group_advantages,
)
from .rubric import (
    RubricError,
    TaskKind,
    classify_complexity,
    breadth_level,
    depth_level,
    iter_nodes,
    parse_rubric_tree,
    validate_structure,
)
from .runtime import (
    AgentConfig,
    ScriptedPolicy,
    ToolRegistry,
    build_default_registry,
    run_episode,
)
from .scoring import (
    JudgePair,
    LeafVerdict,
    ScoringError,
    score_objective,
    score_open_ended,
)
from .state import (
    StateValidationError,
    Strategy,
    merge_states,
    state_to_payload,
    validate_state,
)
from .trajectory import (
    Citation,
    extract_citations,
    read_trajectories,
    session_text,
    split_sessions,
    write_trajectories,
)

ENV_CACHE_DIR = "DRKIT_CACHE_DIR"
ENV_CONTEXT_THRESHOLD = "DRKIT_CONTEXT_THRESHOLD"
ENV_SEMANTIC_THRESHOLD = "DRKIT_SEMANTIC_THRESHOLD"

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class RuntimeFailure(click.ClickException):
    """Bad paths, flags, or unreadable inputs: exit code 2, no report owed."""

    exit_code = EXIT_RUNTIME


def _dump(payload) -> str:
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"


def _fmt(value: float) -> str:
    return format(value, ".12g")


def _emit(payload, out: str | None, summary: str) -> None:
    """Report to --out (summary on stdout) or report to stdout (summary on stderr)."""
    text = _dump(payload)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        click.echo(summary)
    else:
        click.echo(text, nl=False)
        click.echo(summary, err=True)


def _read_json(path: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise RuntimeFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RuntimeFailure(f"{path} is not valid JSON: {exc}") from exc


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise RuntimeFailure(f"cannot read {path}: {exc}") from exc


def _load_policy(spec: str) -> ScriptedPolicy:
    if not spec.startswith("mock:"):
        raise RuntimeFailure(
            f"unsupported policy {spec!r}; only mock:<script path> is available"
        )
    messages = _read_json(spec[len("mock:"):])
    if not isinstance(messages, list) or not all(isinstance(m, str) for m in messages):
        raise RuntimeFailure("policy script must be a JSON array of message strings")
    return ScriptedPolicy(messages)


def _cache_dir(option_value: str | None) -> Path:
    return Path(option_value or os.environ.get(ENV_CACHE_DIR) or ".drkit_cache")


def _offline_condenser(turns, prev_state) -> str:
    """Deterministic stand-in for the condenser model: collects queries and
    visited URLs from the window into a minimal valid state update."""
    queries: list[dict] = []
    sources: list[dict] = []
    seen_q: set[str] = set()
    seen_u: set[str] = set()
    for turn in turns:
        for call in turn.tool_calls or ():
            if call.name in ("search", "google_scholar"):
                for q in call.arguments.get("query", []):
                    if q not in seen_q:
                        seen_q.add(q)
                        queries.append({"q": q, "intent": "collected from window"})
            elif call.name == "visit":
                for url in call.arguments.get("url", []):
                    if url not in seen_u:
                        seen_u.add(url)
                        sources.append({"url": url, "note": "visited in window"})
    return json.dumps(
        {
            "version": "dr_state",
            "search_queries": queries,
            "visited_sources": sources,
            "information_state": {"trusted": [], "untrusted": [], "uncertain": []},
        }
    )


def _offline_registry(cache: ToolCache, semantic_threshold: float) -> ToolRegistry:
    embedder = hashing_embedder(64)
    return build_default_registry(
        cache,
        live_search=lambda q: f"[offline] no cached result for {q!r}",
        live_fetch=lambda url: f"[offline] no cached content for {url}",
        summarizer=lambda content, goal: {
            "rational": goal,
            "evidence": str(content)[:400],
            "summary": str(content)[:200],
        },
        interpreter=lambda code: "[offline] PythonInterpreter is not available",
        embedder=embedder,
        semantic_threshold=semantic_threshold,
    )


def _agent_config(config_file: str | None, strategy: str, threshold: int | None,
                  max_turns: int | None, date: str | None) -> AgentConfig:
    base: dict = {}
    if config_file:
        raw = _read_json(config_file)
        base = {
            k: raw[k]
            for k in ("max_turns", "context_threshold_tokens", "current_date")
            if k in raw
        }
        if "strategy" in raw:
            base["strategy"] = Strategy.parse(raw["strategy"])
    if strategy:
        base["strategy"] = Strategy.parse(strategy)
    env_threshold = os.environ.get(ENV_CONTEXT_THRESHOLD)
    if env_threshold:
        base["context_threshold_tokens"] = int(env_threshold)
    if threshold is not None:
        base["context_threshold_tokens"] = threshold
    if max_turns is not None:
        base["max_turns"] = max_turns
    if date is not None:
        base["current_date"] = date
    return AgentConfig(**base)


def _semantic_threshold() -> float:
    return float(os.environ.get(ENV_SEMANTIC_THRESHOLD, "0.9"))


@click.group()
@click.version_option()
def main() -> None:
    """Deep-research toolkit: rubric scoring, context state, rewards, rollouts."""


@main.command("validate-rubric")
@click.option("--tree", "tree_path", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["objective", "open-ended"]), default="objective")
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--figures", "figures_dir", default=None, type=click.Path())
def validate_rubric_cmd(tree_path, kind, out_path, figures_dir) -> None:
    """Parse a rubric tree document and check its structural rules."""
    kind_value = TaskKind(kind.replace("-", "_"))
    try:
        tree = parse_rubric_tree(_read_text(tree_path), kind_value)
    except RubricError as exc:
        _emit({"is_valid": False, "parse_error": str(exc)}, out_path, f"parse error: {exc}")
        sys.exit(EXIT_VALIDATION)
    report = validate_structure(tree)
    payload = report.to_payload() | {"depth": tree.depth, "max_breadth": tree.max_breadth}
    if figures_dir:
        widths: dict[int, int] = {}
        for _, _, depth in iter_nodes(tree):
            widths[depth] = widths.get(depth, 0) + 1
        plots.save_validation_figure(
            {
                "layer_widths": [widths[d] for d in sorted(widths)],
                "depth": tree.depth,
                "max_breadth": tree.max_breadth,
            },
            Path(figures_dir) / "rubric_layers.png",
        )
    verdict = "valid" if report.is_valid else f"{len(report.violations)} violation(s)"
    _emit(payload, out_path, f"rubric {verdict}, depth={tree.depth}, breadth={tree.max_breadth}")
    sys.exit(0 if report.is_valid else EXIT_VALIDATION)


@main.command("classify")
@click.option("--tree", "tree_path", required=True, type=click.Path())
@click.option("--kind", type=click.Choice(["objective", "open-ended"]), default="objective")
@click.option("--out", "out_path", default=None, type=click.Path())
def classify_cmd(tree_path, kind, out_path) -> None:
    """Classify a rubric tree onto the C1..C9 breadth-by-depth grid."""
    kind_value = TaskKind(kind.replace("-", "_"))
    try:
        tree = parse_rubric_tree(_read_text(tree_path), kind_value)
        complexity = classify_complexity(tree)
    except RubricError as exc:
        _emit({"error": str(exc)}, out_path, f"unclassifiable: {exc}")
        sys.exit(EXIT_VALIDATION)
    payload = {
        "class": complexity,
        "depth": tree.depth,
        "max_breadth": tree.max_breadth,
        "breadth_level": f"B{breadth_level(tree.max_breadth)}",
        "depth_level": f"D{depth_level(tree.depth)}",
    }
    _emit(payload, out_path, f"{complexity} (depth={tree.depth}, breadth={tree.max_breadth})")


def _load_verdicts(path: str) -> list[LeafVerdict]:
    raw = _read_json(path)
    if isinstance(raw, dict):
        return [LeafVerdict(path=p, passed=bool(v)) for p, v in raw.items()]
    return [
        LeafVerdict(path=v["path"], passed=bool(v["passed"]), evidence=v.get("evidence"))
        for v in raw
    ]


@main.command("score-objective")
@click.option("--tree", "tree_path", required=True, type=click.Path())
@click.option("--verdicts", "verdicts_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--figures", "figures_dir", default=None, type=click.Path())
def score_objective_cmd(tree_path, verdicts_path, out_path, figures_dir) -> None:
    """Score an objective tree from per-leaf verdicts."""
    try:
        tree = parse_rubric_tree(_read_text(tree_path), TaskKind.OBJECTIVE)
        report = score_objective(tree, _load_verdicts(verdicts_path))
    except (RubricError, ScoringError, KeyError) as exc:
        _emit({"error": str(exc)}, out_path, f"scoring failed: {exc}")
        sys.exit(EXIT_VALIDATION)
    payload = report.to_payload()
    if figures_dir:
        plots.save_objective_score_figure(payload, Path(figures_dir) / "objective_scores.png")
    _emit(payload, out_path, f"root score {report.root_score:.4f}")


def _load_pairs(path: str) -> list[JudgePair]:
    raw = _read_json(path)
    if isinstance(raw, dict):
        return [
            JudgePair(path=p, candidate_score=float(v[0]), reference_score=float(v[1]))
            for p, v in raw.items()
        ]
    return [
        JudgePair(
            path=v["path"],
            candidate_score=float(v["candidate_score"]),
            reference_score=float(v["reference_score"]),
        )
        for v in raw
    ]


@main.command("score-open-ended")
@click.option("--tree", "tree_path", required=True, type=click.Path())
@click.option("--pairs", "pairs_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def score_open_ended_cmd(tree_path, pairs_path, out_path) -> None:
    """Aggregate judge pairs over an open-ended tree into a pairwise score."""
    try:
        tree = parse_rubric_tree(_read_text(tree_path), TaskKind.OPEN_ENDED)
        report = score_open_ended(tree, _load_pairs(pairs_path))
    except (RubricError, ScoringError, KeyError) as exc:
        _emit({"error": str(exc)}, out_path, f"scoring failed: {exc}")
        sys.exit(EXIT_VALIDATION)
    _emit(
        report.to_payload(),
        out_path,
        f"pairwise {report.pairwise:.4f} (candidate {report.j_candidate:.4f} "
        f"vs reference {report.j_reference:.4f})",
    )


@main.command("calibrate")
@click.option("--pairwise", required=True, type=float)
@click.option("--out", "out_path", default=None, type=click.Path())
def calibrate_cmd(pairwise, out_path) -> None:
    """Map a pairwise score to the discrete rubric-reward level."""
    try:
        level = calibrate_open_ended(pairwise)
    except ValueError as exc:
        _emit({"error": str(exc)}, out_path, f"error: {exc}")
        sys.exit(EXIT_VALIDATION)
    if out_path:
        _emit({"pairwise": pairwise, "s_rubric": level}, out_path, _fmt(level))
    else:
        click.echo(_fmt(level))


@main.command("fact-reward")
@click.option("--labels", "labels_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def fact_reward_cmd(labels_path, out_path) -> None:
    """Fraction of supported citations among determinate labels."""
    raw = _read_json(labels_path)
    try:
        labels = [
            FactLabel(
                citation=Citation(claim=item["claim"], url=item["url"]),
                label=CitationLabel(item["label"]),
            )
            for item in raw
        ]
        value = fact_reward(labels)
    except (ValueError, KeyError, TypeError) as exc:
        _emit({"error": str(exc)}, out_path, f"invalid labels: {exc}")
        sys.exit(EXIT_VALIDATION)
    counts = {
        "supported": sum(1 for l in labels if l.label is CitationLabel.SUPPORTED),
        "unsupported": sum(1 for l in labels if l.label is CitationLabel.UNSUPPORTED),
        "unknown": sum(1 for l in labels if l.label is CitationLabel.UNKNOWN),
    }
    if out_path:
        _emit(counts | {"s_fact": value}, out_path, _fmt(value))
    else:
        click.echo(_fmt(value))


@main.command("combine-reward")
@click.option("--s-rubric", "s_rubric", required=True, type=float)
@click.option("--s-fact", "s_fact", required=True, type=float)
@click.option("--out", "out_path", default=None, type=click.Path())
def combine_reward_cmd(s_rubric, s_fact, out_path) -> None:
    """Combined reward R = 0.75*s_rubric + 0.25*min(s_fact, s_rubric)."""
    try:
        value = combine(s_rubric, s_fact)
    except ValueError as exc:
        _emit({"error": str(exc)}, out_path, f"error: {exc}")
        sys.exit(EXIT_VALIDATION)
    if out_path:
        _emit({"s_rubric": s_rubric, "s_fact": s_fact, "R": value}, out_path, _fmt(value))
    else:
        click.echo(_fmt(value))


@main.command("advantages")
@click.option("--group", "group_path", required=True, type=click.Path())
@click.option("--epsilon", default=1e-6, type=float, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
@click.option("--figures", "figures_dir", default=None, type=click.Path())
def advantages_cmd(group_path, epsilon, out_path, figures_dir) -> None:
    """Group-normalize rewards and broadcast advantages to sessions."""
    raw = _read_json(group_path)
    try:
        records = tuple(
            RewardRecord.from_scores(r["rollout_id"], float(r["s_rubric"]), float(r["s_fact"]))
            for r in raw["rollouts"]
        )
        group = RolloutGroup(
            group_id=raw["group_id"],
            members=tuple((r["rollout_id"], int(r.get("sessions", 1))) for r in raw["rollouts"]),
            rewards=records,
        )
        result = group_advantages(group, epsilon=epsilon)
    except (ValueError, KeyError, TypeError) as exc:
        _emit({"error": str(exc)}, out_path, f"invalid group: {exc}")
        sys.exit(EXIT_VALIDATION)
    rollouts = [
        record.with_advantage(result.by_rollout[record.rollout_id]).to_payload(raw["group_id"])
        for record in records
    ]
    payload = {
        "group_id": raw["group_id"],
        "rollouts": rollouts,
        "per_session": [
            {"rollout_id": rid, "A": adv} for rid, adv in result.per_session
        ],
    }
    if figures_dir:
        plots.save_advantage_figure(rollouts, Path(figures_dir) / "advantages.png")
    _emit(payload, out_path, f"{len(rollouts)} rollouts normalized in {raw['group_id']}")


@main.command("validate-state")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def validate_state_cmd(in_path, out_path) -> None:
    """Validate a context-state document against the strict schema."""
    try:
        state = validate_state(_read_text(in_path))
    except StateValidationError as exc:
        _emit(
            {"is_valid": False, "problems": exc.problems},
            out_path,
            f"invalid state: {len(exc.problems)} problem(s)",
        )
        sys.exit(EXIT_VALIDATION)
    _emit(
        {"is_valid": True, "state": state_to_payload(state)},
        out_path,
        f"valid state: {len(state.trusted)} trusted, {len(state.untrusted)} untrusted, "
        f"{len(state.uncertain)} uncertain",
    )


@main.command("merge-state")
@click.option("--prev", "prev_path", required=True, type=click.Path())
@click.option("--update", "update_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def merge_state_cmd(prev_path, update_path, out_path) -> None:
    """Merge a state update into a previous state under the dedup rules."""
    try:
        prev = validate_state(_read_text(prev_path))
        update = validate_state(_read_text(update_path))
    except StateValidationError as exc:
        _emit({"is_valid": False, "problems": exc.problems}, out_path, f"invalid input: {exc}")
        sys.exit(EXIT_VALIDATION)
    merged = merge_states(prev, update)
    _emit(
        state_to_payload(merged),
        out_path,
        f"merged: {len(merged.trusted)} trusted, {len(merged.untrusted)} untrusted, "
        f"{len(merged.uncertain)} uncertain",
    )


@main.command("split-sessions")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def split_sessions_cmd(in_path, out_path) -> None:
    """Split trajectories (JSONL) into sessions (JSONL, one per line)."""
    lines = []
    count = 0
    t_index = -1
    try:
        for t_index, trajectory in enumerate(read_trajectories(in_path)):
            for session in split_sessions(trajectory):
                count += 1
                lines.append(
                    json.dumps(
                        {
                            "trajectory_index": t_index,
                            "session_index": session.index,
                            "prefix_state": (
                                state_to_payload(session.prefix_state)
                                if session.prefix_state is not None
                                else None
                            ),
                            "text": session_text(session, task=trajectory.task),
                            "turns": len(session.turns),
                        },
                        ensure_ascii=False,
                    )
                )
    except OSError as exc:
        raise RuntimeFailure(f"cannot read {in_path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        _emit({"error": str(exc)}, out_path, f"error: {exc}")
        sys.exit(EXIT_VALIDATION)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    click.echo(f"{count} session(s) from {t_index + 1} trajectory(ies)")


@main.command("extract-citations")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def extract_citations_cmd(in_path, out_path) -> None:
    """Extract deduplicated (claim, url) citations from an answer text file."""
    citations = extract_citations(_read_text(in_path))
    payload = {"citations": [{"claim": c.claim, "url": c.url} for c in citations]}
    _emit(payload, out_path, f"{len(citations)} citation(s)")


@main.command("run-episode")
@click.option("--task", "task_path", required=True, type=click.Path())
@click.option("--policy", "policy_spec", required=True)
@click.option("--strategy", default="condense", show_default=True)
@click.option("--threshold", default=None, type=int)
@click.option("--max-turns", default=None, type=int)
@click.option("--date", default=None)
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("--config", "config_file", default=None, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def run_episode_cmd(task_path, policy_spec, strategy, threshold, max_turns, date,
                    cache_dir, config_file, out_path) -> None:
    """Run one scripted research episode and persist the trajectory."""
    task = _read_text(task_path).strip()
    policy = _load_policy(policy_spec)
    config = _agent_config(config_file, strategy, threshold, max_turns, date)
    cache = ToolCache(_cache_dir(cache_dir))
    try:
        registry = _offline_registry(cache, _semantic_threshold())
        trajectory = run_episode(
            task, policy, registry, config=config, condenser=_offline_condenser
        )
    finally:
        cache.close()
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(out_path, [trajectory])
    sessions = split_sessions(trajectory)
    click.echo(
        f"status={trajectory.status.value} turns={len(trajectory.turns)} "
        f"sessions={len(sessions)}"
    )


def _load_evaluator(spec: str):
    if not spec.startswith("mock:"):
        raise RuntimeFailure(
            f"unsupported evaluator {spec!r}; only mock:<report path> is available"
        )
    raw = _read_json(spec[len("mock:"):])
    if not isinstance(raw, dict):
        raise RuntimeFailure("evaluator mock must be a JSON object")
    if "s_rubric" in raw:
        flat = EvalReport(s_rubric=float(raw["s_rubric"]), s_fact=float(raw.get("s_fact", 0.0)))
        return lambda trajectory: flat
    by_task = {
        task: EvalReport(s_rubric=float(v["s_rubric"]), s_fact=float(v.get("s_fact", 0.0)))
        for task, v in raw.items()
    }

    def evaluate(trajectory):
        report = by_task.get(trajectory.task)
        if report is None:
            raise ValueError(f"no mock evaluation for task {trajectory.task!r}")
        return report

    return evaluate


@main.command("run-pipeline")
@click.option("--tasks", "tasks_path", required=True, type=click.Path())
@click.option("--policy", "policy_spec", required=True)
@click.option("--evaluator", "evaluator_spec", required=True)
@click.option("--strategy", default="condense", show_default=True)
@click.option("--threshold", default=None, type=int)
@click.option("--max-turns", default=None, type=int)
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("--config", "config_file", default=None, type=click.Path())
@click.option("--rollout-workers", default=None, type=int)
@click.option("--evaluator-pool", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--group-size", default=None, type=int)
@click.option("--eval-timeout", default=None, type=float)
@click.option("--max-reissues", default=None, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--rewards", "rewards_path", default=None, type=click.Path())
@click.option("--figures", "figures_dir", default=None, type=click.Path())
def run_pipeline_cmd(tasks_path, policy_spec, evaluator_spec, strategy, threshold,
                     max_turns, cache_dir, config_file, rollout_workers, evaluator_pool,
                     batch_size, group_size, eval_timeout, max_reissues,
                     out_path, rewards_path, figures_dir) -> None:
    """Run the asynchronous rollout/evaluation pipeline over scripted mocks."""
    tasks = _read_json(tasks_path)
    if not isinstance(tasks, list) or not all(isinstance(t, str) for t in tasks):
        raise click.ClickException("tasks file must be a JSON array of task strings")
    policy = _load_policy(policy_spec)
    evaluator = _load_evaluator(evaluator_spec)
    agent_config = _agent_config(config_file, strategy, threshold, max_turns, None)

    pipeline_fields: dict = {}
    if config_file:
        raw = _read_json(config_file)
        pipeline_fields = {
            k: raw[k]
            for k in (
                "rollout_workers", "evaluator_pool", "batch_size",
                "group_size", "eval_timeout", "max_reissues",
            )
            if k in raw
        }
    for name, value in (
        ("rollout_workers", rollout_workers),
        ("evaluator_pool", evaluator_pool),
        ("batch_size", batch_size),
        ("group_size", group_size),
        ("eval_timeout", eval_timeout),
        ("max_reissues", max_reissues),
    ):
        if value is not None:
            pipeline_fields[name] = value
    # sequential by default so identical inputs give byte-identical outputs;
    # raise the worker counts to trade that for throughput
    pipeline_fields.setdefault("rollout_workers", 1)
    pipeline_fields.setdefault("evaluator_pool", 1)
    try:
        config = PipelineConfig(**pipeline_fields)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc

    cache = ToolCache(_cache_dir(cache_dir))
    try:
        registry = _offline_registry(cache, _semantic_threshold())
        pipeline = RolloutPipeline(
            policy, evaluator, registry,
            config=config, agent_config=agent_config, condenser=_offline_condenser,
        )
        batch_lines = []
        reward_lines = []
        batch_sizes = []
        for batch in pipeline.run(tasks):
            batch_sizes.append(len(batch.samples))
            for record in batch.records:
                batch_lines.append(
                    json.dumps({"batch": batch.index} | record.to_payload(), ensure_ascii=False)
                )
            for sample in batch.samples:
                reward_lines.append(
                    json.dumps(sample.reward.to_payload(sample.group_id), ensure_ascii=False)
                )
        metrics = pipeline.metrics.snapshot()
    finally:
        cache.close()

    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Path(out_path).write_text(
        "\n".join(batch_lines) + ("\n" if batch_lines else ""), encoding="utf-8"
    )
    sidecar = Path(rewards_path) if rewards_path else Path(out_path).with_suffix(".rewards.jsonl")
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_text("\n".join(reward_lines) + ("\n" if reward_lines else ""), encoding="utf-8")
    if figures_dir:
        plots.save_pipeline_figure(metrics, batch_sizes, Path(figures_dir) / "pipeline.png")
    click.echo(
        f"batches={metrics['batches_emitted']} samples={sum(batch_sizes)} "
        f"failed={metrics['failed_samples']} timeouts={metrics['timeouts']} "
        f"reissues={metrics['reissues']}"
    )


@main.command("cache-stats")
@click.option("--cache-dir", default=None, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
def cache_stats_cmd(cache_dir, out_path) -> None:
    """Entry counts and hit/miss counters for both cache layers."""
    cache = ToolCache(_cache_dir(cache_dir))
    try:
        stats = cache.stats()
    finally:
        cache.close()
    _emit(
        stats,
        out_path,
        f"search entries={stats['search']['entries']} visit entries={stats['visit']['entries']}",
    )


if __name__ == "__main__":
    main()
