"""Rubric trees: hierarchical answer constraints with criticality and aggregation.

A rubric tree document is a nested JSON map of node-name to node body:

    {
      "Root": {
        "description": "...",
        "critical": true,
        "aggregation_strategy": "sequential",
        "children": {
          "Step 1": {"description": "...", "critical": false},
          ...
        }
      }
    }

Leaves omit ``aggregation_strategy`` and ``children``. Open-ended trees
additionally carry a ``weight`` on every dimension and leaf, and their
second layer is fixed to the four shared dimensions (instruction
following, comprehensiveness, readability, insight). An optional boolean
``item`` field tags second-level item nodes explicitly; when absent, the
tag is derived from the node name.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Mapping

PATH_SEP = "/"

WEIGHT_SUM_TOL = 1e-6

OPEN_ENDED_DIMENSIONS = frozenset(
    {"instruction following", "comprehensiveness", "readability", "insight"}
)

_NODE_KEYS = {"description", "critical", "aggregation_strategy", "weight", "children", "item"}

# Names like "Item 3", "3rd item", "the 1st item", "item_2".
_ITEM_NAME_RE = re.compile(
    r"(?i)(?:^|[\s_-])(?:the[\s_-]+)?(?:\d+(?:st|nd|rd|th)?[\s_-]*item|item[\s_-]*\d+)(?=[\s_-]|$)"
)

_REFERENCE_RE = re.compile(r"(?i)\b(?:url|reference)\b")


class RubricError(ValueError):
    """Malformed rubric document or violated operation precondition."""


class ComplexityError(RubricError):
    """Tree depth falls outside the classifiable 2..6 range."""


class Aggregation(str, Enum):
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"
    LEAF = "leaf"


class TaskKind(str, Enum):
    OBJECTIVE = "objective"
    OPEN_ENDED = "open_ended"


@dataclass(frozen=True)
class RubricNode:
    """One criterion. Internal nodes aggregate children; leaves are binary checks."""

    name: str
    description: str
    critical: bool
    aggregation: Aggregation
    children: tuple["RubricNode", ...] = ()
    weight: float | None = None
    item: bool | None = None

    @property
    def is_leaf(self) -> bool:
        return self.aggregation is Aggregation.LEAF

    def is_item(self) -> bool:
        """Explicit ``item`` tag, or the name heuristic when untagged."""
        if self.item is not None:
            return self.item
        return bool(_ITEM_NAME_RE.search(self.name))


@dataclass(frozen=True)
class RubricTree:
    root: RubricNode
    kind: TaskKind
    depth: int
    max_breadth: int

    @classmethod
    def from_root(cls, root: RubricNode, kind: TaskKind) -> "RubricTree":
        depth, breadth = _measure(root)
        return cls(root=root, kind=kind, depth=depth, max_breadth=breadth)


@dataclass(frozen=True)
class Violation:
    rule: str
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()
    warnings: tuple[Violation, ...] = ()

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def to_payload(self) -> dict:
        return {
            "is_valid": self.is_valid,
            "violations": [
                {"rule": v.rule, "path": v.path, "message": v.message} for v in self.violations
            ],
            "warnings": [
                {"rule": v.rule, "path": v.path, "message": v.message} for v in self.warnings
            ],
        }


def _measure(root: RubricNode) -> tuple[int, int]:
    depth = 0
    breadth = 0
    layer = [root]
    while layer:
        depth += 1
        breadth = max(breadth, len(layer))
        layer = [child for node in layer for child in node.children]
    return depth, breadth


def iter_nodes(tree: RubricTree) -> Iterator[tuple[str, RubricNode, int]]:
    """Yield (path, node, depth) in document order; root has depth 1."""

    def walk(node: RubricNode, path: str, depth: int) -> Iterator[tuple[str, RubricNode, int]]:
        yield path, node, depth
        for child in node.children:
            yield from walk(child, path + PATH_SEP + child.name, depth + 1)

    yield from walk(tree.root, tree.root.name, 1)


def iter_leaves(tree: RubricTree) -> Iterator[tuple[str, RubricNode]]:
    for path, node, _ in iter_nodes(tree):
        if node.is_leaf:
            yield path, node


def _canonical_dimension(name: str) -> str:
    return " ".join(re.sub(r"[^a-z0-9]+", " ", name.lower()).split())


def _parse_node(name: str, body: object, path: str) -> RubricNode:
    if not isinstance(body, Mapping):
        raise RubricError(f"node {path!r}: body must be an object, got {type(body).__name__}")
    extra = set(body) - _NODE_KEYS
    if extra:
        raise RubricError(f"node {path!r}: unknown keys {sorted(extra)}")
    if "description" not in body or not isinstance(body["description"], str):
        raise RubricError(f"node {path!r}: missing or non-string description")
    if "critical" not in body or not isinstance(body["critical"], bool):
        raise RubricError(f"node {path!r}: missing or non-boolean critical flag")

    weight = body.get("weight")
    if weight is not None:
        if isinstance(weight, bool) or not isinstance(weight, (int, float)):
            raise RubricError(f"node {path!r}: weight must be a number")
        if not 0.0 <= float(weight) <= 1.0:
            raise RubricError(f"node {path!r}: weight {weight} outside [0, 1]")
        weight = float(weight)

    item = body.get("item")
    if item is not None and not isinstance(item, bool):
        raise RubricError(f"node {path!r}: item tag must be a boolean")

    children_map = body.get("children") or {}
    if not isinstance(children_map, Mapping):
        raise RubricError(f"node {path!r}: children must be an object")

    strategy = body.get("aggregation_strategy")
    if children_map:
        if strategy is None:
            raise RubricError(f"node {path!r}: node with children is missing aggregation_strategy")
        if strategy not in (Aggregation.SEQUENTIAL.value, Aggregation.PARALLEL.value):
            raise RubricError(f"node {path!r}: unknown aggregation_strategy {strategy!r}")
        aggregation = Aggregation(strategy)
    else:
        if strategy is not None:
            raise RubricError(f"node {path!r}: leaf node carries aggregation_strategy")
        aggregation = Aggregation.LEAF

    children = tuple(
        _parse_node(child_name, child_body, path + PATH_SEP + str(child_name))
        for child_name, child_body in children_map.items()
    )
    _check_sibling_weights(children, path)
    return RubricNode(
        name=str(name),
        description=body["description"],
        critical=body["critical"],
        aggregation=aggregation,
        children=children,
        weight=weight,
        item=item,
    )


def _check_sibling_weights(siblings: tuple[RubricNode, ...], parent_path: str) -> None:
    weighted = [c for c in siblings if c.weight is not None]
    if not weighted:
        return
    if len(weighted) != len(siblings):
        missing = [c.name for c in siblings if c.weight is None]
        raise RubricError(f"node {parent_path!r}: children {missing} are missing weights")
    total = sum(c.weight for c in weighted)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise RubricError(
            f"node {parent_path!r}: sibling weights sum to {total:.8f}, expected 1"
        )


def parse_rubric_tree(text: str | Mapping, kind: TaskKind | str = TaskKind.OBJECTIVE) -> RubricTree:
    """Parse a rubric document into a tree, computing depth and max breadth."""
    kind = TaskKind(kind)
    if isinstance(text, Mapping):
        doc = text
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise RubricError(f"malformed rubric document: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise RubricError("rubric document must be a JSON object")
    if len(doc) == 0:
        raise RubricError("rubric document has no root node")
    if len(doc) > 1:
        raise RubricError(f"rubric document has {len(doc)} top-level nodes, expected one root")
    (root_name, root_body), = doc.items()
    root = _parse_node(str(root_name), root_body, str(root_name))

    if kind is TaskKind.OPEN_ENDED:
        _check_open_ended_shape(root)
    return RubricTree.from_root(root, kind)


def _check_open_ended_shape(root: RubricNode) -> None:
    names = [_canonical_dimension(c.name) for c in root.children]
    if len(root.children) != 4 or set(names) != OPEN_ENDED_DIMENSIONS:
        raise RubricError(
            "open-ended tree must have exactly four root dimensions "
            f"{sorted(OPEN_ENDED_DIMENSIONS)}, got {names}"
        )
    for dim in root.children:
        for leaf in dim.children:
            if not leaf.is_leaf:
                raise RubricError(
                    f"open-ended dimension {dim.name!r} must contain only leaf criteria, "
                    f"found internal node {leaf.name!r}"
                )


def _node_to_payload(node: RubricNode) -> dict:
    body: dict = {"description": node.description, "critical": node.critical}
    if not node.is_leaf:
        body["aggregation_strategy"] = node.aggregation.value
    if node.weight is not None:
        body["weight"] = node.weight
    if node.item is not None:
        body["item"] = node.item
    if node.children:
        body["children"] = {child.name: _node_to_payload(child) for child in node.children}
    return body


def serialize_rubric_tree(tree: RubricTree) -> str:
    """Inverse of :func:`parse_rubric_tree`; children order is preserved."""
    return json.dumps({tree.root.name: _node_to_payload(tree.root)}, indent=2, ensure_ascii=False)


def validate_structure(tree: RubricTree) -> ValidationReport:
    """Check the automatable structural rules; violations are data, not errors."""
    violations: list[Violation] = []
    warnings: list[Violation] = []

    nodes = list(iter_nodes(tree))

    seen: dict[str, str] = {}
    for path, node, _ in nodes:
        if node.description in seen:
            violations.append(
                Violation(
                    "duplicate-description",
                    path,
                    f"description duplicates node {seen[node.description]!r}",
                )
            )
        else:
            seen[node.description] = path

    item_nodes = [c for c in tree.root.children if not c.critical and c.is_item()]
    if len(item_nodes) > 5:
        violations.append(
            Violation(
                "item-limit",
                tree.root.name,
                f"{len(item_nodes)} non-critical item nodes at the second level, limit is 5",
            )
        )

    if tree.depth > 6:
        violations.append(
            Violation("max-depth", tree.root.name, f"depth {tree.depth} exceeds 6")
        )

    for path, node, depth in nodes:
        if node.is_leaf:
            if node.children:
                violations.append(
                    Violation("leaf-has-children", path, "leaf node has non-empty children")
                )
            continue
        if depth > 2 and not _has_reference_leaf(node):
            violations.append(
                Violation(
                    "missing-reference-leaf",
                    path,
                    "non-leaf node below the second level has no critical URL-reference leaf child",
                )
            )

    if tree.kind is TaskKind.OBJECTIVE:
        for path, node, _ in nodes:
            if node.weight is not None:
                warnings.append(
                    Violation("objective-weights", path, "weight on an objective tree is ignored")
                )

    return ValidationReport(violations=tuple(violations), warnings=tuple(warnings))


def _has_reference_leaf(node: RubricNode) -> bool:
    return any(
        child.is_leaf
        and child.critical
        and (_REFERENCE_RE.search(child.name) or _REFERENCE_RE.search(child.description))
        for child in node.children
    )


_CLASS_TABLE = {
    # (breadth level, depth level) -> class
    (1, 1): "C1", (1, 2): "C2", (1, 3): "C3",
    (2, 1): "C4", (2, 2): "C5", (2, 3): "C6",
    (3, 1): "C7", (3, 2): "C8", (3, 3): "C9",
}


def breadth_level(max_breadth: int) -> int:
    if max_breadth <= 3:
        return 1
    if max_breadth <= 11:
        return 2
    return 3


def depth_level(depth: int) -> int:
    if depth == 2:
        return 1
    if depth in (3, 4):
        return 2
    if depth in (5, 6):
        return 3
    raise ComplexityError(f"depth {depth} is outside the classifiable range 2..6")


def classify_complexity(tree: RubricTree) -> str:
    """Map the tree's breadth and depth levels onto the C1..C9 grid."""
    return _CLASS_TABLE[(breadth_level(tree.max_breadth), depth_level(tree.depth))]
