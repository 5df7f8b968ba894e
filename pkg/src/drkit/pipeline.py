"""Asynchronous rollout -> evaluation -> batch accumulation at desk scale.

N rollout workers produce trajectories, M evaluator supervisors score them
(each attempt on its own daemon thread so a stalled evaluator only costs a
timeout), and the batch consumer assembles complete rollout groups into
fixed-size training batches, computing group advantages at batch-formation
time. The two hand-off queues are bounded, so slow stages apply backpressure
instead of growing memory. A batch never mixes incomplete groups; a group
with a failed member is dropped whole.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Mapping, Sequence

from .rewards import (
    DEFAULT_ADVANTAGE_EPSILON,
    GroupAdvantages,
    RewardRecord,
    RolloutGroup,
    group_advantages,
)
from .rubric import TaskKind
from .runtime import AgentConfig, PolicyInterface, ToolRegistry, run_episode
from .state import Condenser, TokenCounter, default_token_counter
from .trajectory import (
    Session,
    Trajectory,
    filter_trajectory,
    session_text,
    split_sessions,
)

REFLECTION_HINT_HEADING = "EVALUATION FEEDBACK FROM PREVIOUS ATTEMPT (hint)"


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalReport:
    """Evaluator output for one trajectory."""

    s_rubric: float
    s_fact: float
    node_scores: Mapping | None = None


Evaluator = Callable[[Trajectory], EvalReport]


@dataclass(frozen=True)
class PipelineConfig:
    rollout_workers: int = 2
    evaluator_pool: int = 2
    batch_size: int = 8
    group_size: int = 8
    eval_timeout: float = 60.0
    max_reissues: int = 1

    def __post_init__(self) -> None:
        for name in ("rollout_workers", "evaluator_pool", "batch_size", "group_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2 for advantage normalization")
        if self.batch_size % self.group_size != 0:
            raise ValueError("batch_size must be divisible into groups of group_size")
        if self.eval_timeout <= 0:
            raise ValueError("eval_timeout must be positive")
        if self.max_reissues < 0:
            raise ValueError("max_reissues must be nonnegative")


@dataclass(frozen=True)
class ScoredSample:
    rollout_id: str
    group_id: str
    task: str
    sessions: tuple[Session, ...]
    policy_version: int
    eval_duration: float
    reward: RewardRecord | None = None
    status: str = "ok"  # "ok" | "failed"
    error: str | None = None


@dataclass(frozen=True)
class BatchRecord:
    session: str
    advantage: float
    policy_version: int
    rollout_id: str
    group_id: str
    session_index: int

    def to_payload(self) -> dict:
        return {
            "session": self.session,
            "advantage": self.advantage,
            "policy_version": self.policy_version,
            "rollout_id": self.rollout_id,
            "group_id": self.group_id,
            "session_index": self.session_index,
        }


@dataclass(frozen=True)
class TrainingBatch:
    index: int
    samples: tuple[ScoredSample, ...]
    records: tuple[BatchRecord, ...]
    advantages: tuple[GroupAdvantages, ...]


@dataclass(frozen=True)
class _RolloutJob:
    rollout_id: str
    group_id: str
    task: str
    trajectory: Trajectory
    sessions: tuple[Session, ...]
    policy_version: int


class PipelineMetrics:
    """Thread-safe counters plus live queue depths."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.in_flight_rollouts = 0
        self.in_flight_evals = 0
        self.batches_emitted = 0
        self.timeouts = 0
        self.reissues = 0
        self.failed_samples = 0
        self._queues: dict[str, queue.Queue] = {}

    def attach_queues(self, **queues: queue.Queue) -> None:
        self._queues = dict(queues)

    def add(self, field: str, delta: int = 1) -> None:
        with self._lock:
            setattr(self, field, getattr(self, field) + delta)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "in_flight_rollouts": self.in_flight_rollouts,
                "in_flight_evals": self.in_flight_evals,
                "queue_depths": {name: q.qsize() for name, q in self._queues.items()},
                "batches_emitted": self.batches_emitted,
                "timeouts": self.timeouts,
                "reissues": self.reissues,
                "failed_samples": self.failed_samples,
            }


class RolloutPipeline:
    """Owns the worker threads and the batch assembly for one training run."""

    def __init__(
        self,
        policy: PolicyInterface,
        evaluator: Evaluator,
        registry: ToolRegistry,
        config: PipelineConfig | None = None,
        agent_config: AgentConfig | None = None,
        condenser: Condenser | None = None,
        policy_version_fn: Callable[[], int] | None = None,
        advantage_epsilon: float = DEFAULT_ADVANTAGE_EPSILON,
        token_counter: TokenCounter = default_token_counter,
    ):
        self.policy = policy
        self.evaluator = evaluator
        self.registry = registry
        self.config = config or PipelineConfig()
        self.agent_config = agent_config or AgentConfig()
        self.condenser = condenser
        self.policy_version_fn = policy_version_fn or (lambda: 0)
        self.advantage_epsilon = advantage_epsilon
        self.token_counter = token_counter
        self.metrics = PipelineMetrics()

    def _episode_policy(self) -> PolicyInterface:
        clone = getattr(self.policy, "clone", None)
        return clone() if callable(clone) else self.policy

    def _rollout_worker(self, work: queue.Queue, out: queue.Queue) -> None:
        while True:
            try:
                task, group_id, rollout_id = work.get_nowait()
            except queue.Empty:
                return
            self.metrics.add("in_flight_rollouts", 1)
            version = self.policy_version_fn()
            try:
                trajectory = run_episode(
                    task,
                    self._episode_policy(),
                    self.registry,
                    config=self.agent_config,
                    condenser=self.condenser,
                    token_counter=self.token_counter,
                )
                sessions = tuple(split_sessions(trajectory))
                out.put(
                    _RolloutJob(
                        rollout_id=rollout_id,
                        group_id=group_id,
                        task=task,
                        trajectory=trajectory,
                        sessions=sessions,
                        policy_version=version,
                    )
                )
            except Exception as exc:
                self._scored.put(
                    ScoredSample(
                        rollout_id=rollout_id,
                        group_id=group_id,
                        task=task,
                        sessions=(),
                        policy_version=version,
                        eval_duration=0.0,
                        status="failed",
                        error=f"rollout failed: {exc}",
                    )
                )
            finally:
                self.metrics.add("in_flight_rollouts", -1)

    def _evaluate_once(self, trajectory: Trajectory) -> tuple[EvalReport | None, str | None, bool]:
        """One timed attempt; returns (report, error, finished_within_timeout)."""
        box: list = []
        done = threading.Event()

        def attempt() -> None:
            try:
                box.append(("ok", self.evaluator(trajectory)))
            except Exception as exc:
                box.append(("error", str(exc)))
            finally:
                done.set()

        threading.Thread(target=attempt, daemon=True).start()
        if not done.wait(self.config.eval_timeout):
            return None, None, False
        kind, value = box[0]
        if kind == "ok":
            return value, None, True
        return None, value, True

    def _eval_supervisor(self, jobs: queue.Queue) -> None:
        while True:
            job = jobs.get()
            if job is None:
                return
            self.metrics.add("in_flight_evals", 1)
            started = time.perf_counter()
            sample: ScoredSample | None = None
            for attempt in range(1 + self.config.max_reissues):
                report, error, finished = self._evaluate_once(job.trajectory)
                if not finished:
                    self.metrics.add("timeouts", 1)
                    if attempt < self.config.max_reissues:
                        self.metrics.add("reissues", 1)
                    continue
                duration = time.perf_counter() - started
                if error is not None:
                    sample = self._failed(job, duration, f"evaluator failed: {error}")
                    break
                try:
                    reward = RewardRecord.from_scores(
                        job.rollout_id, report.s_rubric, report.s_fact
                    )
                except Exception as exc:
                    sample = self._failed(job, duration, f"invalid evaluation: {exc}")
                    break
                sample = ScoredSample(
                    rollout_id=job.rollout_id,
                    group_id=job.group_id,
                    task=job.task,
                    sessions=job.sessions,
                    policy_version=job.policy_version,
                    eval_duration=duration,
                    reward=reward,
                )
                break
            if sample is None:
                sample = self._failed(
                    job,
                    time.perf_counter() - started,
                    f"evaluation timed out after {1 + self.config.max_reissues} attempts",
                )
            self._scored.put(sample)
            self.metrics.add("in_flight_evals", -1)

    def _failed(self, job: _RolloutJob, duration: float, error: str) -> ScoredSample:
        self.metrics.add("failed_samples", 1)
        return ScoredSample(
            rollout_id=job.rollout_id,
            group_id=job.group_id,
            task=job.task,
            sessions=job.sessions,
            policy_version=job.policy_version,
            eval_duration=duration,
            status="failed",
            error=error,
        )

    def _form_batch(
        self, index: int, groups: Sequence[list[ScoredSample]]
    ) -> TrainingBatch:
        samples: list[ScoredSample] = []
        records: list[BatchRecord] = []
        advantages: list[GroupAdvantages] = []
        for group in groups:
            rollout_group = RolloutGroup(
                group_id=group[0].group_id,
                members=tuple((s.rollout_id, max(1, len(s.sessions))) for s in group),
                rewards=tuple(s.reward for s in group),
            )
            adv = group_advantages(rollout_group, epsilon=self.advantage_epsilon)
            advantages.append(adv)
            for sample in group:
                a = adv.by_rollout[sample.rollout_id]
                enriched = replace(sample, reward=sample.reward.with_advantage(a))
                samples.append(enriched)
                for session in sample.sessions:
                    records.append(
                        BatchRecord(
                            session=session_text(session, task=sample.task),
                            advantage=a,
                            policy_version=sample.policy_version,
                            rollout_id=sample.rollout_id,
                            group_id=sample.group_id,
                            session_index=session.index,
                        )
                    )
        return TrainingBatch(
            index=index,
            samples=tuple(samples),
            records=tuple(records),
            advantages=tuple(advantages),
        )

    def run(self, tasks: Sequence[str]) -> Iterator[TrainingBatch]:
        """Yield training batches as soon as enough complete groups are scored."""
        if not tasks:
            raise PipelineError("run_pipeline requires at least one task")
        cfg = self.config
        work: queue.Queue = queue.Queue()
        trajectories: queue.Queue = queue.Queue(maxsize=cfg.batch_size)
        self._scored: queue.Queue = queue.Queue(maxsize=cfg.batch_size)
        self.metrics.attach_queues(trajectories=trajectories, scored=self._scored)

        expected = 0
        for t, task in enumerate(tasks):
            for r in range(cfg.group_size):
                work.put((task, f"g{t}", f"g{t}.r{r}"))
                expected += 1

        workers = [
            threading.Thread(
                target=self._rollout_worker, args=(work, trajectories), daemon=True
            )
            for _ in range(cfg.rollout_workers)
        ]
        supervisors = [
            threading.Thread(target=self._eval_supervisor, args=(trajectories,), daemon=True)
            for _ in range(cfg.evaluator_pool)
        ]
        for thread in workers + supervisors:
            thread.start()

        def closer() -> None:
            for worker in workers:
                worker.join()
            for _ in supervisors:
                trajectories.put(None)

        threading.Thread(target=closer, daemon=True).start()

        pending: dict[str, list[ScoredSample]] = {}
        failed_groups: set[str] = set()
        ready: list[list[ScoredSample]] = []
        accounted = 0
        batch_index = 0
        groups_per_batch = cfg.batch_size // cfg.group_size

        while accounted < expected:
            try:
                sample = self._scored.get(timeout=0.25)
            except queue.Empty:
                alive = any(t.is_alive() for t in workers + supervisors)
                if not alive and self._scored.empty():
                    raise PipelineError(
                        f"pipeline stalled with {expected - accounted} unaccounted samples"
                    )
                continue
            accounted += 1
            if sample.status == "failed":
                failed_groups.add(sample.group_id)
                pending.pop(sample.group_id, None)
                continue
            if sample.group_id in failed_groups:
                continue
            group = pending.setdefault(sample.group_id, [])
            group.append(sample)
            if len(group) == cfg.group_size:
                ready.append(pending.pop(sample.group_id))
            while len(ready) >= groups_per_batch:
                take, ready = ready[:groups_per_batch], ready[groups_per_batch:]
                batch = self._form_batch(batch_index, take)
                batch_index += 1
                self.metrics.add("batches_emitted", 1)
                yield batch

        if ready:
            batch = self._form_batch(batch_index, ready)
            self.metrics.add("batches_emitted", 1)
            yield batch


def run_pipeline(
    tasks: Sequence[str],
    policy: PolicyInterface,
    evaluator: Evaluator,
    config: PipelineConfig | None = None,
    **kwargs,
) -> Iterator[TrainingBatch]:
    """Convenience wrapper over :class:`RolloutPipeline`."""
    registry = kwargs.pop("registry", None)
    if registry is None:
        raise PipelineError("run_pipeline requires a registry keyword argument")
    pipeline = RolloutPipeline(policy, evaluator, registry, config=config, **kwargs)
    return pipeline.run(tasks)


def reflection_retry(
    task: str,
    eval_report: Mapping | object,
    prior_score: float,
    kind: TaskKind | str,
    policy: PolicyInterface,
    registry: ToolRegistry,
    config: AgentConfig | None = None,
    condenser: Condenser | None = None,
    token_counter: TokenCounter = default_token_counter,
) -> Trajectory:
    """Re-run a failed task with the per-node evaluation injected as a hint."""
    if filter_trajectory(prior_score, kind):
        raise ValueError(
            f"prior score {prior_score} already meets the retention threshold; nothing to retry"
        )
    if hasattr(eval_report, "to_json"):
        hint = eval_report.to_json()
    elif hasattr(eval_report, "to_payload"):
        hint = json.dumps(eval_report.to_payload(), indent=2, ensure_ascii=False)
    else:
        hint = json.dumps(eval_report, indent=2, ensure_ascii=False)
    hinted_task = f"{task}\n\n{REFLECTION_HINT_HEADING}\n{hint}"
    return run_episode(
        hinted_task,
        policy,
        registry,
        config=config,
        condenser=condenser,
        token_counter=token_counter,
    )
