import json
import random

import pytest

from drkit.rubric import TaskKind, iter_leaves, parse_rubric_tree
from drkit.scoring import (
    JudgePair,
    LeafVerdict,
    ScoringError,
    average_weights,
    score_objective,
    score_open_ended,
)

from conftest import (
    oracle_root,
    random_objective_tree,
    random_open_ended_tree,
    random_verdicts,
)


def all_pass(tree):
    return [LeafVerdict(path=p, passed=True) for p, _ in iter_leaves(tree)]


def verdicts_with(tree, failures):
    return [
        LeafVerdict(path=p, passed=p not in failures) for p, _ in iter_leaves(tree)
    ]


class TestObjective:
    def test_listeria_all_pass_scores_one(self, listeria_tree):
        report = score_objective(listeria_tree, all_pass(listeria_tree))
        assert report.root_score == 1.0
        assert not report.nodes["Root"].failed

    def test_listeria_critical_leaf_zeroes_root(self, listeria_tree):
        report = score_objective(
            listeria_tree,
            verdicts_with(listeria_tree, {"Root/Deadlier Outbreak Identified"}),
        )
        assert report.root_score == 0.0
        assert report.nodes["Root"].failed

    def test_fcc_one_failed_branch_gives_two_thirds(self, fcc_tree):
        report = score_objective(
            fcc_tree,
            verdicts_with(
                fcc_tree, {"Root/NORS Reporting Timelines/Final Report"}
            ),
        )
        assert report.nodes["Root/NORS Reporting Timelines"].score == 0.0
        assert report.nodes["Root/NORS Reporting Timelines"].failed
        assert report.root_score == pytest.approx(2 / 3, abs=1e-12)

    def test_sequential_zeroing_marks_forced(self):
        doc = json.dumps({
            "Root": {
                "description": "r",
                "critical": False,
                "aggregation_strategy": "sequential",
                "children": {
                    "A": {"description": "a", "critical": False},
                    "B": {"description": "b", "critical": False},
                    "C": {"description": "c", "critical": False},
                },
            }
        })
        tree = parse_rubric_tree(doc)
        report = score_objective(tree, verdicts_with(tree, {"Root/A"}))
        assert report.nodes["Root/A"].failed and not report.nodes["Root/A"].forced
        for path in ("Root/B", "Root/C"):
            assert report.nodes[path].forced
            assert report.nodes[path].failed
            assert report.nodes[path].score == 0.0
        assert report.root_score == 0.0  # aggregate zero also fails the node
        assert report.nodes["Root"].failed

    def test_sequential_middle_failure_keeps_earlier_credit(self):
        doc = json.dumps({
            "Root": {
                "description": "r",
                "critical": False,
                "aggregation_strategy": "sequential",
                "children": {
                    "A": {"description": "a", "critical": False},
                    "B": {"description": "b", "critical": False},
                    "C": {"description": "c", "critical": False},
                },
            }
        })
        tree = parse_rubric_tree(doc)
        report = score_objective(tree, verdicts_with(tree, {"Root/B"}))
        assert report.nodes["Root/A"].score == 1.0
        assert report.nodes["Root/C"].forced
        assert report.root_score == pytest.approx(1 / 3)

    def test_forced_critical_child_cascades(self):
        # B fails; C is forced and critical, so the root fails outright.
        doc = json.dumps({
            "Root": {
                "description": "r",
                "critical": False,
                "aggregation_strategy": "sequential",
                "children": {
                    "A": {"description": "a", "critical": False},
                    "B": {"description": "b", "critical": False},
                    "C": {"description": "c", "critical": True},
                },
            }
        })
        tree = parse_rubric_tree(doc)
        report = score_objective(tree, verdicts_with(tree, {"Root/B"}))
        assert report.nodes["Root"].failed
        assert report.root_score == 0.0

    def test_missing_verdict_rejected(self, listeria_tree):
        with pytest.raises(ScoringError, match="missing"):
            score_objective(listeria_tree, all_pass(listeria_tree)[:-1])

    def test_duplicate_verdict_rejected(self, listeria_tree):
        verdicts = all_pass(listeria_tree)
        with pytest.raises(ScoringError, match="duplicate"):
            score_objective(listeria_tree, verdicts + [verdicts[0]])

    def test_non_leaf_verdict_rejected(self, listeria_tree):
        verdicts = all_pass(listeria_tree) + [LeafVerdict(path="Root", passed=True)]
        with pytest.raises(ScoringError, match="not a leaf"):
            score_objective(listeria_tree, verdicts)

    def test_matches_brute_force_oracle(self):
        rng = random.Random(42)
        for _ in range(300):
            tree = random_objective_tree(rng)
            verdicts, lookup = random_verdicts(rng, tree)
            report = score_objective(tree, verdicts)
            assert report.root_score == pytest.approx(oracle_root(tree, lookup), abs=1e-12)
            assert 0.0 <= report.root_score <= 1.0

    def test_flipping_leaf_to_pass_never_decreases_root(self):
        rng = random.Random(99)
        for _ in range(100):
            tree = random_objective_tree(rng)
            verdicts, lookup = random_verdicts(rng, tree)
            base = score_objective(tree, verdicts).root_score
            failing = [v.path for v in verdicts if not v.passed]
            if not failing:
                continue
            flip = rng.choice(failing)
            flipped = [
                LeafVerdict(path=v.path, passed=True if v.path == flip else v.passed)
                for v in verdicts
            ]
            assert score_objective(tree, flipped).root_score >= base - 1e-12


class TestOpenEnded:
    def pairs_for(self, tree, candidate, reference):
        return [
            JudgePair(path=p, candidate_score=candidate, reference_score=reference)
            for p, _ in iter_leaves(tree)
        ]

    def test_identical_scores_give_half(self, apple_tree):
        report = score_open_ended(apple_tree, self.pairs_for(apple_tree, 7.0, 7.0))
        assert report.pairwise == 0.5

    def test_direct_substitution(self):
        # j_candidate = 0.6, j_reference = 0.4 -> pairwise = 0.6
        rng = random.Random(5)
        tree = random_open_ended_tree(rng)
        report = score_open_ended(tree, self.pairs_for(tree, 6.0, 4.0))
        assert report.j_candidate == pytest.approx(0.6)
        assert report.j_reference == pytest.approx(0.4)
        assert report.pairwise == pytest.approx(0.6)

    def test_apple_fixture_reproduces_reported_scores(self, apple_tree):
        report = score_open_ended(apple_tree, self.pairs_for(apple_tree, 8.0, 10.0))
        assert report.j_candidate == pytest.approx(0.8, abs=1e-9)
        assert report.j_reference == pytest.approx(1.0, abs=1e-9)
        assert report.pairwise == pytest.approx(4 / 9, abs=1e-9)

    def test_both_zero_gives_half(self, apple_tree):
        report = score_open_ended(apple_tree, self.pairs_for(apple_tree, 0.0, 0.0))
        assert report.pairwise == 0.5

    def test_scale_invariance(self):
        rng = random.Random(21)
        for _ in range(50):
            tree = random_open_ended_tree(rng)
            pairs = [
                JudgePair(
                    path=p,
                    candidate_score=rng.uniform(0.5, 10.0),
                    reference_score=rng.uniform(0.5, 10.0),
                )
                for p, _ in iter_leaves(tree)
            ]
            base = score_open_ended(tree, pairs).pairwise
            c = rng.uniform(0.05, 1.0)
            scaled = [
                JudgePair(
                    path=p.path,
                    candidate_score=p.candidate_score * c,
                    reference_score=p.reference_score * c,
                )
                for p in pairs
            ]
            assert score_open_ended(tree, scaled).pairwise == pytest.approx(base, abs=1e-9)

    def test_score_out_of_range_rejected(self, apple_tree):
        pairs = self.pairs_for(apple_tree, 8.0, 10.0)
        pairs[0] = JudgePair(path=pairs[0].path, candidate_score=11.0, reference_score=5.0)
        with pytest.raises(ScoringError, match="outside"):
            score_open_ended(apple_tree, pairs)

    def test_requires_open_ended_tree(self, fcc_tree):
        with pytest.raises(ScoringError, match="open-ended"):
            score_open_ended(fcc_tree, [])

    def test_missing_weight_rejected(self):
        doc = json.dumps({
            "Root": {
                "description": "r",
                "critical": False,
                "aggregation_strategy": "parallel",
                "children": {
                    name: {
                        "description": f"{name} branch",
                        "critical": False,
                        "aggregation_strategy": "parallel",
                        "children": {
                            f"{name} leaf": {"description": f"{name} leaf d", "critical": False}
                        },
                    }
                    for name in (
                        "Instruction Following", "Comprehensiveness",
                        "Readability", "Insight",
                    )
                },
            }
        })
        tree = parse_rubric_tree(doc, TaskKind.OPEN_ENDED)
        pairs = self.pairs_for(tree, 5.0, 5.0)
        with pytest.raises(ScoringError, match="no weight"):
            score_open_ended(tree, pairs)


class TestAverageWeights:
    def test_identical_assignments_unchanged(self):
        sample = {"R/a": 0.25, "R/b": 0.75}
        assert average_weights([sample, sample, sample]) == pytest.approx(sample)

    def test_arithmetic_mean(self):
        samples = [
            {"R/a": 0.2, "R/b": 0.8},
            {"R/a": 0.4, "R/b": 0.6},
            {"R/a": 0.3, "R/b": 0.7},
        ]
        result = average_weights(samples)
        assert result["R/a"] == pytest.approx(0.3)
        assert result["R/b"] == pytest.approx(0.7)

    def test_renormalizes_rounding_drift(self):
        samples = [
            {"R/a": 0.3333334, "R/b": 0.6666666},
            {"R/a": 0.333333, "R/b": 0.666667},
            {"R/a": 0.3333333, "R/b": 0.6666667},
        ]
        result = average_weights(samples)
        assert sum(result.values()) == pytest.approx(1.0, abs=1e-15)

    def test_renormalizes_per_sibling_set(self):
        samples = [
            {"R/d1": 0.5, "R/d2": 0.5, "R/d1/x": 0.9999995, "R/d1/y": 1e-7 * 5},
            {"R/d1": 0.5, "R/d2": 0.5, "R/d1/x": 0.9999995, "R/d1/y": 5e-7},
            {"R/d1": 0.5, "R/d2": 0.5, "R/d1/x": 0.9999995, "R/d1/y": 5e-7},
        ]
        result = average_weights(samples)
        assert result["R/d1/x"] + result["R/d1/y"] == pytest.approx(1.0, abs=1e-15)
        assert result["R/d1"] + result["R/d2"] == pytest.approx(1.0, abs=1e-15)

    def test_wrong_sample_count_rejected(self):
        sample = {"R/a": 1.0}
        with pytest.raises(ScoringError, match="exactly 3"):
            average_weights([sample, sample])

    def test_mismatched_node_sets_rejected(self):
        with pytest.raises(ScoringError, match="different node set"):
            average_weights([
                {"R/a": 1.0}, {"R/b": 1.0}, {"R/a": 1.0},
            ])

    def test_bad_sibling_sum_rejected(self):
        bad = {"R/a": 0.6, "R/b": 0.6}
        good = {"R/a": 0.5, "R/b": 0.5}
        with pytest.raises(ScoringError, match="sum"):
            average_weights([good, bad, good])
