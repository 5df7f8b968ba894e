"""Rubric and fact-checking rewards, their combination, and group advantages.

The combined reward is R = 0.75 * s_rubric + 0.25 * min(s_fact, s_rubric),
so fact-checking can never contribute more than the rubric score allows.
Advantages standardize rewards within a rollout group over unique rollouts
(population standard deviation) and broadcast one value to every session of
a rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable

from .trajectory import Citation

DEFAULT_ADVANTAGE_EPSILON = 1e-6

RUBRIC_WEIGHT = 0.75
FACT_WEIGHT = 0.25

# (inclusive lower bound, reward level); pairwise strictly above 0.5 maps to 1.0.
CALIBRATION_BANDS = (
    (0.475, 0.75),
    (0.45, 0.5),
    (0.425, 0.25),
    (0.0, 0.0),
)


class RewardError(ValueError):
    pass


class CitationLabel(str, Enum):
    SUPPORTED = "supported"
    UNSUPPORTED = "unsupported"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class FactLabel:
    citation: Citation
    label: CitationLabel


@dataclass(frozen=True)
class RewardRecord:
    rollout_id: str
    s_rubric: float
    s_fact: float
    combined: float
    advantage: float | None = None

    def __post_init__(self) -> None:
        expected = combine(self.s_rubric, self.s_fact)
        if self.combined != expected:
            raise RewardError(
                f"combined reward {self.combined} does not match "
                f"0.75*s_rubric + 0.25*min(s_fact, s_rubric) = {expected}"
            )

    @classmethod
    def from_scores(cls, rollout_id: str, s_rubric: float, s_fact: float) -> "RewardRecord":
        return cls(
            rollout_id=rollout_id,
            s_rubric=s_rubric,
            s_fact=s_fact,
            combined=combine(s_rubric, s_fact),
        )

    def with_advantage(self, advantage: float) -> "RewardRecord":
        return replace(self, advantage=advantage)

    def to_payload(self, group_id: str | None = None) -> dict:
        payload = {
            "rollout_id": self.rollout_id,
            "s_rubric": self.s_rubric,
            "s_fact": self.s_fact,
            "R": self.combined,
            "A": self.advantage,
        }
        if group_id is not None:
            payload["group_id"] = group_id
        return payload


@dataclass(frozen=True)
class RolloutGroup:
    group_id: str
    members: tuple[tuple[str, int], ...]  # (rollout_id, session count >= 1)
    rewards: tuple[RewardRecord, ...]


@dataclass(frozen=True)
class GroupAdvantages:
    group_id: str
    by_rollout: dict[str, float]
    per_session: tuple[tuple[str, float], ...]


def calibrate_open_ended(pairwise: float) -> float:
    """Map a pairwise score onto the discrete rubric-reward levels."""
    if not 0.0 <= pairwise <= 1.0:
        raise RewardError(f"pairwise score {pairwise} outside [0, 1]")
    if pairwise > 0.5:
        return 1.0
    for lower, level in CALIBRATION_BANDS:
        if pairwise >= lower:
            return level
    return 0.0


def fact_reward(labels: Iterable[FactLabel]) -> float:
    """Fraction of supported citations among determinate ones; 0 when none."""
    seen: set[tuple[str, str]] = set()
    supported = 0
    unsupported = 0
    for fl in labels:
        key = (fl.citation.claim, fl.citation.url)
        if key in seen:
            raise RewardError(f"duplicate label for citation {key}")
        seen.add(key)
        if fl.label is CitationLabel.SUPPORTED:
            supported += 1
        elif fl.label is CitationLabel.UNSUPPORTED:
            unsupported += 1
    determinate = supported + unsupported
    if determinate == 0:
        return 0.0
    return supported / determinate


def combine(s_rubric: float, s_fact: float) -> float:
    if not 0.0 <= s_rubric <= 1.0:
        raise RewardError(f"s_rubric {s_rubric} outside [0, 1]")
    if not 0.0 <= s_fact <= 1.0:
        raise RewardError(f"s_fact {s_fact} outside [0, 1]")
    return RUBRIC_WEIGHT * s_rubric + FACT_WEIGHT * min(s_fact, s_rubric)


def group_advantages(
    group: RolloutGroup, epsilon: float = DEFAULT_ADVANTAGE_EPSILON
) -> GroupAdvantages:
    """Standardize rewards over unique rollouts and broadcast to sessions."""
    if epsilon <= 0:
        raise RewardError("epsilon must be positive")

    sessions: dict[str, int] = {}
    for rollout_id, count in group.members:
        if count < 1:
            raise RewardError(f"rollout {rollout_id!r} has session count {count} < 1")
        if rollout_id in sessions:
            raise RewardError(f"rollout {rollout_id!r} listed twice in group members")
        sessions[rollout_id] = count

    rewards: dict[str, float] = {}
    for record in group.rewards:
        if record.rollout_id in rewards:
            raise RewardError(f"duplicate reward for rollout {record.rollout_id!r}")
        rewards[record.rollout_id] = record.combined
    if set(rewards) != set(sessions):
        raise RewardError("group rewards do not match group members")
    if len(rewards) < 2:
        raise RewardError("advantage normalization requires at least 2 unique rollouts")

    values = [rewards[rid] for rid, _ in group.members]
    if max(values) == min(values):
        by_rollout = {rid: 0.0 for rid, _ in group.members}
    else:
        n = len(values)
        mean = math.fsum(values) / n
        sigma = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)
        by_rollout = {
            rid: (rewards[rid] - mean) / (sigma + epsilon) for rid, _ in group.members
        }

    per_session = tuple(
        (rid, by_rollout[rid]) for rid, count in group.members for _ in range(count)
    )
    return GroupAdvantages(
        group_id=group.group_id, by_rollout=by_rollout, per_session=per_session
    )
