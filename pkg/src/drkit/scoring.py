"""Scoring engines for rubric trees.

Objective trees score bottom-up from binary leaf verdicts: sequential nodes
zero out every child after the first failure, a failed critical child fails
its parent outright, and surviving internal nodes take the unweighted mean
of their children. Open-ended trees aggregate 0-10 judge scores through
dimension and leaf weights and normalize the candidate against a reference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .rubric import (
    PATH_SEP,
    Aggregation,
    RubricNode,
    RubricTree,
    TaskKind,
    WEIGHT_SUM_TOL,
    iter_leaves,
)


class ScoringError(ValueError):
    """Verdicts or judge pairs do not match the tree being scored."""


@dataclass(frozen=True)
class LeafVerdict:
    path: str
    passed: bool
    evidence: str | None = None


@dataclass(frozen=True)
class NodeScore:
    path: str
    score: float
    failed: bool
    forced: bool = False


@dataclass(frozen=True)
class ObjectiveScoreReport:
    root_score: float
    nodes: Mapping[str, NodeScore]

    def to_payload(self) -> dict:
        return {
            "root_score": self.root_score,
            "nodes": {
                path: {"score": ns.score, "failed": ns.failed, "forced": ns.forced}
                for path, ns in self.nodes.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), indent=2, ensure_ascii=False)

    def failed_paths(self) -> tuple[str, ...]:
        return tuple(path for path, ns in self.nodes.items() if ns.failed)


@dataclass(frozen=True)
class JudgePair:
    """Judge scores for one open-ended leaf, each on the 0-10 scale."""

    path: str
    candidate_score: float
    reference_score: float


@dataclass(frozen=True)
class OpenEndedScoreReport:
    j_candidate: float
    j_reference: float
    pairwise: float

    def to_payload(self) -> dict:
        return {
            "j_candidate": self.j_candidate,
            "j_reference": self.j_reference,
            "pairwise": self.pairwise,
        }


def _verdict_map(tree: RubricTree, verdicts: Iterable[LeafVerdict]) -> dict[str, LeafVerdict]:
    leaf_paths = {path for path, _ in iter_leaves(tree)}
    by_path: dict[str, LeafVerdict] = {}
    for v in verdicts:
        if v.path in by_path:
            raise ScoringError(f"duplicate verdict for leaf {v.path!r}")
        if v.path not in leaf_paths:
            raise ScoringError(f"verdict path {v.path!r} is not a leaf of the tree")
        by_path[v.path] = v
    missing = leaf_paths - set(by_path)
    if missing:
        raise ScoringError(f"missing verdicts for leaves: {sorted(missing)}")
    return by_path


def _mark_forced(node: RubricNode, path: str, out: dict[str, NodeScore]) -> None:
    out[path] = NodeScore(path=path, score=0.0, failed=True, forced=True)
    for child in node.children:
        _mark_forced(child, path + PATH_SEP + child.name, out)


def _evaluate(
    node: RubricNode,
    path: str,
    verdicts: Mapping[str, LeafVerdict],
    out: dict[str, NodeScore],
) -> NodeScore:
    if node.is_leaf:
        passed = verdicts[path].passed
        score = NodeScore(path=path, score=1.0 if passed else 0.0, failed=not passed)
        out[path] = score
        return score

    child_scores: list[NodeScore] = []
    failed_earlier = False
    for child in node.children:
        child_path = path + PATH_SEP + child.name
        if node.aggregation is Aggregation.SEQUENTIAL and failed_earlier:
            _mark_forced(child, child_path, out)
            child_scores.append(out[child_path])
        else:
            child_scores.append(_evaluate(child, child_path, verdicts, out))
        if child_scores[-1].failed:
            failed_earlier = True

    critical_failure = any(
        cs.failed for child, cs in zip(node.children, child_scores) if child.critical
    )
    if critical_failure:
        score, failed = 0.0, True
    else:
        score = sum(cs.score for cs in child_scores) / len(child_scores)
        failed = score == 0.0
    result = NodeScore(path=path, score=score, failed=failed)
    out[path] = result
    return result


def score_objective(tree: RubricTree, verdicts: Iterable[LeafVerdict]) -> ObjectiveScoreReport:
    """Score an objective tree from one verdict per leaf."""
    by_path = _verdict_map(tree, verdicts)
    out: dict[str, NodeScore] = {}
    root = _evaluate(tree.root, tree.root.name, by_path, out)
    return ObjectiveScoreReport(root_score=root.score, nodes=out)


def _require_weight(node: RubricNode, path: str) -> float:
    if node.weight is None:
        raise ScoringError(f"open-ended node {path!r} has no weight")
    return node.weight


def _check_weight_sum(values: Sequence[float], where: str) -> None:
    total = sum(values)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ScoringError(f"{where}: weights sum to {total:.8f}, expected 1")


def score_open_ended(tree: RubricTree, pairs: Iterable[JudgePair]) -> OpenEndedScoreReport:
    """Aggregate per-leaf judge pairs into J(candidate), J(reference), pairwise."""
    if tree.kind is not TaskKind.OPEN_ENDED:
        raise ScoringError("score_open_ended requires an open-ended tree")

    by_path: dict[str, JudgePair] = {}
    for pair in pairs:
        if pair.path in by_path:
            raise ScoringError(f"duplicate judge pair for leaf {pair.path!r}")
        for label, value in (("candidate", pair.candidate_score), ("reference", pair.reference_score)):
            if not 0.0 <= value <= 10.0:
                raise ScoringError(
                    f"leaf {pair.path!r}: {label} score {value} outside [0, 10]"
                )
        by_path[pair.path] = pair
    leaf_paths = {path for path, _ in iter_leaves(tree)}
    if set(by_path) != leaf_paths:
        missing = sorted(leaf_paths - set(by_path))
        extra = sorted(set(by_path) - leaf_paths)
        raise ScoringError(f"judge pairs do not cover the tree (missing {missing}, extra {extra})")

    dims = tree.root.children
    _check_weight_sum(
        [_require_weight(d, tree.root.name + PATH_SEP + d.name) for d in dims],
        "dimension weights",
    )

    j_candidate = 0.0
    j_reference = 0.0
    for dim in dims:
        dim_path = tree.root.name + PATH_SEP + dim.name
        dim_weight = _require_weight(dim, dim_path)
        leaf_weights = []
        cand = 0.0
        ref = 0.0
        for leaf in dim.children:
            leaf_path = dim_path + PATH_SEP + leaf.name
            w = _require_weight(leaf, leaf_path)
            leaf_weights.append(w)
            pair = by_path[leaf_path]
            cand += w * (pair.candidate_score / 10.0)
            ref += w * (pair.reference_score / 10.0)
        _check_weight_sum(leaf_weights, f"leaf weights under {dim_path!r}")
        j_candidate += dim_weight * cand
        j_reference += dim_weight * ref

    denom = j_candidate + j_reference
    pairwise = 0.5 if denom == 0.0 else j_candidate / denom
    return OpenEndedScoreReport(
        j_candidate=j_candidate, j_reference=j_reference, pairwise=pairwise
    )


def average_weights(samples: Sequence[Mapping[str, float]]) -> dict[str, float]:
    """Average exactly three weight assignments and renormalize per sibling set."""
    if len(samples) != 3:
        raise ScoringError(f"expected exactly 3 weight samples, got {len(samples)}")
    keys = set(samples[0])
    for i, sample in enumerate(samples[1:], start=2):
        if set(sample) != keys:
            raise ScoringError(f"weight sample {i} covers a different node set")

    groups: dict[str, list[str]] = {}
    for path in samples[0]:
        parent = path.rsplit(PATH_SEP, 1)[0] if PATH_SEP in path else ""
        groups.setdefault(parent, []).append(path)

    for i, sample in enumerate(samples, start=1):
        for parent, paths in groups.items():
            total = sum(sample[p] for p in paths)
            if abs(total - 1.0) > WEIGHT_SUM_TOL:
                raise ScoringError(
                    f"sample {i}: sibling weights under {parent or '<root>'!r} "
                    f"sum to {total:.8f}, expected 1"
                )

    means = {path: math.fsum(s[path] for s in samples) / 3.0 for path in samples[0]}
    averaged: dict[str, float] = {}
    for paths in groups.values():
        total = math.fsum(means[p] for p in paths)
        for p in paths:
            averaged[p] = means[p] / total
    return {path: averaged[path] for path in samples[0]}
