"""Deep-research agent toolkit: rubric scoring, context state management,
trajectory handling, RL reward shaping, tool caching, and an asynchronous
rollout pipeline."""

from .cache import LookupOutcome, SearchCache, ToolCache, VisitCache
from .pipeline import (
    EvalReport,
    PipelineConfig,
    RolloutPipeline,
    ScoredSample,
    TrainingBatch,
    reflection_retry,
    run_pipeline,
)
from .rewards import (
    CitationLabel,
    FactLabel,
    GroupAdvantages,
    RewardRecord,
    RolloutGroup,
    calibrate_open_ended,
    combine,
    fact_reward,
    group_advantages,
)
from .rubric import (
    Aggregation,
    RubricNode,
    RubricTree,
    TaskKind,
    ValidationReport,
    classify_complexity,
    parse_rubric_tree,
    serialize_rubric_tree,
    validate_structure,
)
from .runtime import (
    AgentConfig,
    ScriptedPolicy,
    ToolRegistry,
    build_default_registry,
    build_prompt,
    dispatch_tool,
    run_episode,
)
from .scoring import (
    JudgePair,
    LeafVerdict,
    NodeScore,
    ObjectiveScoreReport,
    OpenEndedScoreReport,
    average_weights,
    score_objective,
    score_open_ended,
)
from .state import (
    CONDENSE,
    DISCARD_ALL,
    ContextState,
    Strategy,
    WorkingContext,
    apply_strategy,
    default_token_counter,
    keep_last_n,
    merge_states,
    serialize_state,
    should_condense,
    validate_state,
)
from .trajectory import (
    Citation,
    Session,
    ToolCall,
    Trajectory,
    TrajectoryStatus,
    Turn,
    extract_citations,
    filter_trajectory,
    parse_assistant_message,
    serialize_message,
    split_sessions,
)

__version__ = "0.1.0"
