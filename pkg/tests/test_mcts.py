from __future__ import annotations

import math
import random
from collections import deque
from decimal import Decimal, getcontext

import pytest

from criticplan.critics import CriticKind
from criticplan.errors import ContractViolationError, SearchRunError
from criticplan.generation import SamplingConfig, ScriptedBackend, ScriptedRule
from criticplan.mcts import (
    ExactMatchOracle,
    MctsConfig,
    TreeNode,
    dump_tree,
    extract_pairs,
    run_mcts,
    select_path,
    ucb1,
)
from criticplan.mdp import (
    ChooseCandidate,
    ChooseSubGoal,
    ProblemInstance,
    SubGoal,
    apply,
    root_state,
)
from criticplan.critics import export_pairs
from tests._toys import reasoning_toy
from tests.conftest import advance_subgoal, rationale


def reference_ucb1(v, n, parent_n, c):
    getcontext().prec = 60
    value = Decimal(v) / Decimal(n) + Decimal(c) * (
        Decimal(parent_n).ln() / Decimal(n)
    ).sqrt()
    return float(value)


class TestUcb1:
    def test_frozen_example(self):
        # Frozen from the high-precision reference evaluation of the formula.
        assert ucb1(3, 2, 10, 1.0) == pytest.approx(2.5729830131446736, abs=1e-9)

    def test_zero_exploration_is_mean(self):
        assert ucb1(3, 2, 10, 0.0) == 1.5

    def test_single_visit_root(self):
        assert ucb1(0, 1, 1, 5.0) == 0.0

    def test_unvisited_node_is_contract_violation(self):
        with pytest.raises(ContractViolationError):
            ucb1(0, 0, 1, 1.0)

    def test_matches_reference_on_random_cases(self):
        rng = random.Random(23)
        for _ in range(200):
            n = rng.randint(1, 1000)
            parent_n = rng.randint(n, 5000)
            v = rng.uniform(0, n)
            c = rng.uniform(0, 3)
            assert ucb1(v, n, parent_n, c) == pytest.approx(
                reference_ucb1(v, n, parent_n, c), abs=1e-9
            )


def constant_backend(answer="nope"):
    return ScriptedBackend(
        sample_rules=[ScriptedRule(match=(), candidates=("alpha", "beta"))],
        default_conclusion=answer,
    )


class ConstantOracle:
    def __init__(self, value):
        self.value = value

    def evaluate(self, problem, final_answer):
        return self.value


def toy_config(iterations=8, k=2, horizon=4):
    return MctsConfig(
        iterations=iterations, sampling=SamplingConfig(k=k), horizon=horizon
    )


class TestRunMcts:
    def test_single_iteration_bookkeeping(self, problem):
        root = run_mcts(problem, constant_backend(), ConstantOracle(0.25), toy_config(iterations=1))
        assert root.n == 1
        assert len(root.children) == 1
        child = root.children[0]
        assert child.n == 1
        assert root.v == child.v == 0.25

    def test_constant_zero_oracle(self, problem):
        root = run_mcts(problem, constant_backend(), ConstantOracle(0.0), toy_config(iterations=16))
        for node in root.walk():
            assert node.v == 0.0
        assert root.n == 16
        assert all(node.n > 0 for node in root.walk())

    def test_conservation_invariant(self, problem):
        def check(root, _iteration):
            for node in root.walk():
                assert node.n == sum(c.n for c in node.children) + node.sim_count

        root = run_mcts(
            problem, constant_backend(), ConstantOracle(0.5), toy_config(iterations=24),
            iteration_hook=check,
        )
        assert root.n == 24

    def test_path_consistency(self, problem):
        snapshots = []

        def snapshot(root, _iteration):
            snapshots.append({id(n): (n.v, n.n, n.sim_count) for n in root.walk()})

        root = run_mcts(
            problem, constant_backend(), ConstantOracle(1.0), toy_config(iterations=12),
            iteration_hook=snapshot,
        )
        nodes = {id(n): n for n in root.walk()}
        for before, after in zip(snapshots, snapshots[1:]):
            changed = {
                node_id for node_id, stats in after.items()
                if node_id not in before or before[node_id] != stats
            }
            simulated = [
                node_id for node_id in changed
                if after[node_id][2] != before.get(node_id, (0, 0, 0))[2]
            ]
            assert len(simulated) == 1
            # The changed set is exactly the simulated node's ancestor chain.
            chain = set()
            cursor = nodes[simulated[0]]
            while cursor is not None:
                chain.add(id(cursor))
                cursor = cursor.parent
            assert changed == chain

    def test_aborts_over_quarter_fail_the_run(self, problem):
        class FlakyBackend:
            def __init__(self):
                self.calls = 0

            def sample(self, prompt, k, temperature):
                return ["alpha", "beta"]

            def conclude(self, prompt):
                self.calls += 1
                from criticplan.errors import BackendError

                raise BackendError("down")

        with pytest.raises(SearchRunError):
            run_mcts(problem, FlakyBackend(), ConstantOracle(0.0), toy_config(iterations=8))

    def test_dead_query_branch_is_simulated_not_fatal(self, problem):
        # The querying branch has no preceding rationale at the root, so its
        # candidate sampling cannot run; the node still gets simulated.
        root = run_mcts(problem, constant_backend(), ConstantOracle(0.0), toy_config(iterations=12))
        genquery = [
            c for c in root.children
            if c.incoming_action == ChooseSubGoal(SubGoal.QUERYING)
        ]
        assert len(genquery) == 1
        assert genquery[0].dead
        assert genquery[0].n >= 1

    def test_correct_arm_wins_on_toy_problem(self):
        toy = reasoning_toy(1, n_candidates=2)
        problem = toy.problems[0]
        cfg = MctsConfig(iterations=64, sampling=SamplingConfig(k=2), horizon=toy.horizon)
        root = run_mcts(problem, toy.backend, ExactMatchOracle(), cfg)
        reason_node = next(
            c for c in root.children
            if c.incoming_action == ChooseSubGoal(SubGoal.REASONING)
        )
        by_text = {c.observation.text: c for c in reason_node.children}
        correct = toy.correct[(problem.problem_id, 1)]
        wrong = next(t for t in by_text if t != correct)
        assert by_text[correct].mean_value > by_text[wrong].mean_value


class TestSelectionEquivalence:
    def _random_tree(self, rng, branching=3, depth=3):
        problem = ProblemInstance(problem_id="frozen", statement="s")
        base = root_state(problem, horizon=99)
        root = TreeNode(state=base)
        root.n = 1

        def grow(node, level):
            node.pending = deque()
            if level == depth:
                return
            for i in range(rng.randint(2, branching)):
                child = TreeNode(state=base, parent=node)
                child.observation = rationale(f"c{level}-{i}")
                child.n = rng.randint(1, 50)
                child.v = rng.uniform(0, child.n)
                node.children.append(child)
                if rng.random() < 0.7:
                    grow(child, level + 1)
            node.n = max(node.n, sum(c.n for c in node.children) + 1)

        grow(root, 0)
        return root

    def _brute_force_path(self, root, c):
        path = [root]
        node = root
        while node.pending is not None and not node.pending and node.children:
            scores = [
                child.v / child.n + c * math.sqrt(math.log(node.n) / child.n)
                for child in node.children
            ]
            top = max(scores)
            node = node.children[min(i for i, s in enumerate(scores) if s == top)]
            path.append(node)
        return path

    def test_matches_brute_force_on_frozen_trees(self):
        rng = random.Random(31)
        for _ in range(120):
            root = self._random_tree(rng)
            c = rng.uniform(0, 2.5)
            assert select_path(root, c) == self._brute_force_path(root, c)


def frozen_sibling_group(problem, stats):
    """Parent pending a Reason sub-goal with children at given (v, n)."""
    state = advance_subgoal(root_state(problem), SubGoal.REASONING)
    parent = TreeNode(state=state)
    parent.pending = deque()
    for i, (v, n) in enumerate(stats):
        obs = rationale(f"candidate {i}")
        child = TreeNode(
            state=apply(state, ChooseCandidate(i, obs), obs),
            observation=obs,
            incoming_action=ChooseCandidate(i, obs),
            parent=parent,
        )
        child.v, child.n = v, n
        child.sim_count = n
        parent.children.append(child)
    parent.n = sum(n for _, n in stats)
    return parent


class TestExtractPairs:
    def test_two_pairs_from_three_children(self, problem):
        parent = frozen_sibling_group(problem, [(8, 10), (3, 10), (3, 10)])
        pairs = extract_pairs(parent, problem)[CriticKind.RATIONALE]
        assert len(pairs) == 2
        assert all(p.chosen.text == "candidate 0" for p in pairs)
        assert {p.rejected.text for p in pairs} == {"candidate 1", "candidate 2"}
        assert all(p.chosen_value == pytest.approx(0.8) for p in pairs)

    def test_equal_means_give_no_pairs(self, problem):
        parent = frozen_sibling_group(problem, [(5, 10), (5, 10), (5, 10)])
        pairs = extract_pairs(parent, problem)
        assert all(not v for v in pairs.values())

    def test_tie_break_prefers_higher_visits(self, problem):
        parent = frozen_sibling_group(problem, [(4, 8), (10, 20), (1, 10)])
        pairs = extract_pairs(parent, problem)[CriticKind.RATIONALE]
        # means 0.5, 0.5, 0.1: chosen is the 0.5 with more visits
        assert all(p.chosen.text == "candidate 1" for p in pairs)
        assert len(pairs) == 1

    def test_max_rejected_subsampling(self, problem):
        parent = frozen_sibling_group(problem, [(9, 10), (5, 10), (3, 10), (1, 10)])
        pairs = extract_pairs(parent, problem, max_rejected_per_group=2)
        assert len(pairs[CriticKind.RATIONALE]) == 2
        values = [p.rejected_value for p in pairs[CriticKind.RATIONALE]]
        assert values == [0.5, 0.3]

    def test_single_visited_child_contributes_nothing(self, problem):
        parent = frozen_sibling_group(problem, [(1, 2), (0, 0)])
        pairs = extract_pairs(parent, problem)
        assert all(not v for v in pairs.values())

    def test_toy_run_routes_kinds(self):
        toy = reasoning_toy(1, n_candidates=2)
        problem = toy.problems[0]
        cfg = MctsConfig(iterations=64, sampling=SamplingConfig(k=2), horizon=toy.horizon)
        root = run_mcts(problem, toy.backend, ExactMatchOracle(), cfg)
        pairs = extract_pairs(root, problem)
        assert pairs[CriticKind.RATIONALE]
        assert pairs[CriticKind.SUBGOAL]
        assert not pairs[CriticKind.QUERY]
        assert not pairs[CriticKind.DOC]
        for pair in pairs[CriticKind.RATIONALE]:
            assert pair.chosen_value > pair.rejected_value


class TestReproducibility:
    def test_identical_runs_export_identical_pair_files(self, tmp_path):
        toy = reasoning_toy(3, n_candidates=2)
        cfg = MctsConfig(iterations=32, sampling=SamplingConfig(k=2), horizon=toy.horizon)

        def collect(directory):
            for problem in toy.problems:
                root = run_mcts(problem, toy.backend, ExactMatchOracle(), cfg)
                pairs = extract_pairs(root, problem)
                export_pairs([p for group in pairs.values() for p in group], directory)

        collect(tmp_path / "a")
        collect(tmp_path / "b")
        files_a = sorted((tmp_path / "a").glob("*.jsonl"))
        files_b = sorted((tmp_path / "b").glob("*.jsonl"))
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for file_a, file_b in zip(files_a, files_b):
            body_a = file_a.read_text().splitlines()[1:]
            body_b = file_b.read_text().splitlines()[1:]
            assert body_a == body_b


class TestDumpTree:
    def test_dump_format(self, tmp_path, problem):
        root = run_mcts(problem, constant_backend(), ConstantOracle(0.5), toy_config(iterations=4))
        path = tmp_path / "tree.jsonl"
        dump_tree(root, path)
        import json

        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["format"] == "tree-dump"
        records = [json.loads(line) for line in lines[1:]]
        assert records[0]["parent"] is None
        assert records[0]["kind"] == "root"
        assert {r["node"] for r in records} == set(range(len(records)))
