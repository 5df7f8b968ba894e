"""Shared fixtures: worked-example trees, independent oracles, random generators."""

from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

from drkit.rubric import Aggregation, RubricNode, RubricTree, TaskKind, parse_rubric_tree
from drkit.scoring import LeafVerdict
from drkit.state import ClaimEntry, ContextState, SearchQuery, VisitedSource

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def listeria_doc() -> str:
    return (DATA_DIR / "listeria_tree.json").read_text()


@pytest.fixture(scope="session")
def fcc_doc() -> str:
    return (DATA_DIR / "fcc_tree.json").read_text()


@pytest.fixture(scope="session")
def apple_doc() -> str:
    return (DATA_DIR / "apple_tree.json").read_text()


@pytest.fixture()
def listeria_tree(listeria_doc) -> RubricTree:
    return parse_rubric_tree(listeria_doc, TaskKind.OBJECTIVE)


@pytest.fixture()
def fcc_tree(fcc_doc) -> RubricTree:
    return parse_rubric_tree(fcc_doc, TaskKind.OBJECTIVE)


@pytest.fixture()
def apple_tree(apple_doc) -> RubricTree:
    return parse_rubric_tree(apple_doc, TaskKind.OPEN_ENDED)


# --- independent scoring oracle -------------------------------------------
#
# Straight recursion over the stated semantics, kept free of the engine's
# bookkeeping: returns only (score, failed) per node.

def oracle_score(node: RubricNode, verdicts: dict[str, bool], path: str) -> tuple[float, bool]:
    if not node.children:
        passed = verdicts[path]
        return (1.0 if passed else 0.0), (not passed)
    results: list[tuple[float, bool]] = []
    earlier_failed = False
    for child in node.children:
        child_path = f"{path}/{child.name}"
        if node.aggregation is Aggregation.SEQUENTIAL and earlier_failed:
            results.append((0.0, True))
        else:
            results.append(oracle_score(child, verdicts, child_path))
        if results[-1][1]:
            earlier_failed = True
    if any(failed for child, (_, failed) in zip(node.children, results) if child.critical):
        return 0.0, True
    score = sum(s for s, _ in results) / len(results)
    return score, score == 0.0


def oracle_root(tree: RubricTree, verdicts: dict[str, bool]) -> float:
    return oracle_score(tree.root, verdicts, tree.root.name)[0]


# --- random structure generators ------------------------------------------

def random_objective_tree(rng: random.Random, max_depth: int = 4, max_nodes: int = 12) -> RubricTree:
    counter = [0]

    def make(depth: int, budget: int) -> RubricNode:
        counter[0] += 1
        name = f"n{counter[0]}"
        description = f"criterion {counter[0]}"
        critical = rng.random() < 0.4
        can_branch = depth < max_depth and budget >= 2
        if not can_branch or rng.random() < 0.35:
            return RubricNode(name, description, critical, Aggregation.LEAF)
        n_children = rng.randint(1, min(3, budget))
        share = (budget - n_children) // n_children
        children = tuple(make(depth + 1, share) for _ in range(n_children))
        aggregation = Aggregation.SEQUENTIAL if rng.random() < 0.5 else Aggregation.PARALLEL
        return RubricNode(name, description, critical, aggregation, children=children)

    root = make(1, max_nodes - 1)
    return RubricTree.from_root(root, TaskKind.OBJECTIVE)


def random_verdicts(rng: random.Random, tree: RubricTree) -> tuple[list[LeafVerdict], dict[str, bool]]:
    from drkit.rubric import iter_leaves

    verdicts = []
    lookup = {}
    for path, _ in iter_leaves(tree):
        passed = rng.random() < 0.7
        verdicts.append(LeafVerdict(path=path, passed=passed))
        lookup[path] = passed
    return verdicts, lookup


def random_open_ended_tree(rng: random.Random) -> RubricTree:
    dims = ["Instruction Following", "Comprehensiveness", "Readability", "Insight"]
    dim_weights = _random_simplex(rng, 4)
    children = {}
    for dim, weight in zip(dims, dim_weights):
        n_leaves = rng.randint(1, 5)
        leaf_weights = _random_simplex(rng, n_leaves)
        kids = {
            f"{dim} c{i}": {
                "description": f"{dim} sub-criterion {i}",
                "critical": False,
                "weight": leaf_weights[i],
            }
            for i in range(n_leaves)
        }
        children[dim] = {
            "description": f"{dim} branch",
            "critical": False,
            "aggregation_strategy": "parallel",
            "weight": weight,
            "children": kids,
        }
    doc = {
        "Report": {
            "description": "overall",
            "critical": False,
            "aggregation_strategy": "parallel",
            "children": children,
        }
    }
    return parse_rubric_tree(json.dumps(doc), TaskKind.OPEN_ENDED)


def _random_simplex(rng: random.Random, n: int) -> list[float]:
    raw = [rng.random() + 0.05 for _ in range(n)]
    total = sum(raw)
    values = [v / total for v in raw]
    # pin the exact sum so parser tolerance never bites
    values[-1] = 1.0 - sum(values[:-1])
    return values


# --- random state generator -------------------------------------------------

def random_state(rng: random.Random, claim_pool: list[str], tag: str) -> ContextState:
    claims = rng.sample(claim_pool, k=rng.randint(0, min(6, len(claim_pool))))
    buckets: dict[str, list[ClaimEntry]] = {"trusted": [], "untrusted": [], "uncertain": []}
    for claim in claims:
        bucket = rng.choice(("trusted", "untrusted", "uncertain"))
        prefix = {"trusted": "T", "untrusted": "U", "uncertain": "C"}[bucket]
        entry = ClaimEntry(
            id=f"{prefix}{len(buckets[bucket]) + 1}",
            claim=claim,
            sources=(f"https://src.example/{tag}/{rng.randint(1, 5)}",),
            reason=f"reason {tag}",
            need=f"search {claim}" if bucket == "uncertain" else None,
        )
        buckets[bucket].append(entry)
    queries = tuple(
        SearchQuery(q=f"query {rng.randint(1, 9)}", intent=f"intent {tag}")
        for _ in range(rng.randint(0, 3))
    )
    seen_q = set()
    queries = tuple(q for q in queries if not (q.q in seen_q or seen_q.add(q.q)))
    sources = tuple(
        VisitedSource(url=f"https://site.example/{rng.randint(1, 9)}", note=f"note {tag}")
        for _ in range(rng.randint(0, 3))
    )
    seen_u = set()
    sources = tuple(s for s in sources if not (s.url in seen_u or seen_u.add(s.url)))
    return ContextState(
        search_queries=queries,
        visited_sources=sources,
        trusted=tuple(buckets["trusted"]),
        untrusted=tuple(buckets["untrusted"]),
        uncertain=tuple(buckets["uncertain"]),
    )
