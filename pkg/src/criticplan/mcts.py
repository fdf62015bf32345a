"""Monte Carlo Tree Search over the planning MDP for critic training data.

Each iteration runs the four classic phases:

    Selection:        descend from the root by UCB1 while nodes are fully
                      expanded and non-terminal.
    Expansion:        materialize exactly one unexplored child. Sub-goal nodes
                      sample their execution candidates once, on first
                      expansion; decision nodes enumerate the legal markers.
    Simulation:       conclude a final answer from the new node's state and
                      score it against the gold label.
    Backpropagation:  add the reward and a visit to every node on the path.

The finished tree is mined for preference pairs: within every sibling group,
the child with the best mean value is chosen and every strictly worse sibling
is rejected.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Protocol

from . import generation, retrieval
from .critics import CriticKind, PreferencePair, build_context
from .errors import (
    BackendError,
    ConfigurationError,
    ContractViolationError,
    EmptyCandidatesError,
    EmptyQueryError,
    MissingRationaleError,
    SearchRunError,
)
from .generation import GeneratorBackend, SamplingConfig
from .mdp import (
    Action,
    AnswerDetector,
    ChooseCandidate,
    NEVER_DETECT,
    Observation,
    ObservationKind,
    ProblemInstance,
    State,
    apply,
    is_terminal,
    root_state,
    subgoal_actions,
    subgoal_observation,
    text_digest,
)

DEFAULT_ITERATIONS = 32
DEFAULT_EXPLORATION = math.sqrt(2)

# Fraction of iterations allowed to abort on backend failures before the
# whole run is declared failed.
MAX_ABORT_FRACTION = 0.25

TREE_DUMP_FORMAT = "tree-dump"
TREE_DUMP_VERSION = 1


@dataclass(frozen=True)
class MctsConfig:
    iterations: int = DEFAULT_ITERATIONS
    exploration: float = DEFAULT_EXPLORATION
    sampling: SamplingConfig = SamplingConfig()
    horizon: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractViolationError("iterations must be >= 1")
        if self.exploration < 0:
            raise ContractViolationError("exploration must be >= 0")


class RewardOracle(Protocol):
    """Training-time comparison of a simulated answer with the gold label."""

    def evaluate(self, problem: ProblemInstance, final_answer: str) -> float: ...


@dataclass(frozen=True)
class ExactMatchOracle:
    """1.0 when the normalized answer equals the normalized gold label, else 0.0."""

    def evaluate(self, problem: ProblemInstance, final_answer: str) -> float:
        return 1.0 if _normalize(final_answer) == _normalize(problem.gold_label) else 0.0


def _normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


class TreeNode:
    """Search-tree node carrying cumulative reward `v` and visit count `n`."""

    __slots__ = (
        "state", "observation", "incoming_action", "parent", "children",
        "v", "n", "sim_count", "pending", "dead",
    )

    def __init__(
        self,
        state: State,
        observation: Observation | None = None,
        incoming_action: Action | None = None,
        parent: "TreeNode | None" = None,
    ):
        self.state = state
        self.observation = observation
        self.incoming_action = incoming_action
        self.parent = parent
        self.children: list[TreeNode] = []
        self.v = 0.0
        self.n = 0
        self.sim_count = 0
        # Unmaterialized child (action, observation) specs; None = not yet
        # computed (sub-goal nodes sample candidates lazily, once).
        self.pending: deque[tuple[Action, Observation]] | None = None
        self.dead = False

    @property
    def mean_value(self) -> float:
        return self.v / self.n if self.n else 0.0

    def is_fully_expanded(self) -> bool:
        return self.pending is not None and not self.pending

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()


def ucb1(v: float, n: int, parent_n: int, c: float) -> float:
    """v/n + c * sqrt(ln(parent_n) / n). Defined only for visited nodes."""
    if n < 1 or parent_n < 1:
        raise ContractViolationError("ucb1 requires n >= 1 and parent_n >= 1")
    return v / n + c * math.sqrt(math.log(parent_n) / n)


def select_path(root: TreeNode, c: float, detector: AnswerDetector = NEVER_DETECT) -> list[TreeNode]:
    """Descend by argmax UCB1 until a node is not fully expanded or terminal.

    Ties break toward the earliest-materialized child.
    """
    path = [root]
    node = root
    while (
        node.is_fully_expanded()
        and node.children
        and not node.dead
        and not is_terminal(node.state, detector)
    ):
        best = node.children[0]
        best_score = ucb1(best.v, best.n, node.n, c)
        for child in node.children[1:]:
            score = ucb1(child.v, child.n, node.n, c)
            if score > best_score:
                best, best_score = child, score
        node = best
        path.append(node)
    return path


def _child_specs(
    node: TreeNode,
    generator: GeneratorBackend,
    corpus: retrieval.Corpus | None,
    sampling: SamplingConfig,
) -> list[tuple[Action, Observation]]:
    state = node.state
    pending = state.pending_subgoal()
    if pending is None:
        return [(a, subgoal_observation(a)) for a in subgoal_actions(state)]
    if pending is ObservationKind.REASON:
        candidates = generation.sample_rationales(state, generator, sampling)
    elif pending is ObservationKind.GENQUERY:
        candidates = generation.sample_queries(state, generator, sampling)
    else:
        if corpus is None:
            raise ConfigurationError("retrieval reachable but no corpus configured")
        query = next(
            obs.text
            for obs in reversed(state.observations)
            if obs.kind is ObservationKind.QUERY
        )
        candidates = retrieval.retrieve(corpus, query, sampling.k)
    return [(ChooseCandidate(i, obs), obs) for i, obs in enumerate(candidates)]


def run_mcts(
    problem: ProblemInstance,
    generator: GeneratorBackend,
    oracle: RewardOracle,
    cfg: MctsConfig,
    corpus: retrieval.Corpus | None = None,
    detector: AnswerDetector = NEVER_DETECT,
    iteration_hook: Callable[[TreeNode, int], None] | None = None,
) -> TreeNode:
    """Run the configured number of iterations and return the tree root.

    Backend failures abort the iteration; the run fails once more than a
    quarter of all iterations aborted. `iteration_hook(root, i)` is invoked
    after each completed iteration (invariant checks, progress reporting).
    """
    root = TreeNode(state=root_state(problem, horizon=cfg.horizon))
    aborted = 0
    for i in range(cfg.iterations):
        try:
            _run_iteration(root, problem, generator, oracle, cfg, corpus, detector)
        except BackendError:
            aborted += 1
            continue
        if iteration_hook is not None:
            iteration_hook(root, i)
    if aborted > MAX_ABORT_FRACTION * cfg.iterations:
        raise SearchRunError(
            f"{aborted}/{cfg.iterations} iterations aborted on backend failures"
        )
    return root


def _run_iteration(
    root: TreeNode,
    problem: ProblemInstance,
    generator: GeneratorBackend,
    oracle: RewardOracle,
    cfg: MctsConfig,
    corpus: retrieval.Corpus | None,
    detector: AnswerDetector,
) -> None:
    node = select_path(root, cfg.exploration, detector)[-1]
    target = node
    if not node.dead and not is_terminal(node.state, detector):
        if node.pending is None:
            try:
                node.pending = deque(_child_specs(node, generator, corpus, cfg.sampling))
            except (EmptyCandidatesError, MissingRationaleError, EmptyQueryError):
                # Nothing to execute here; the node becomes a dead end that is
                # still simulated so its emptiness is priced into the tree.
                node.pending = deque()
        if node.pending:
            action, obs = node.pending.popleft()
            child = TreeNode(
                state=apply(node.state, action, obs),
                observation=obs,
                incoming_action=action,
                parent=node,
            )
            try:
                reward_value = _simulate(child, problem, generator, oracle)
            except BackendError:
                node.pending.appendleft((action, obs))
                raise
            node.children.append(child)
            _backpropagate(child, reward_value)
            return
        if not node.children:
            node.dead = True
    reward_value = _simulate(target, problem, generator, oracle)
    _backpropagate(target, reward_value)


def _simulate(
    node: TreeNode,
    problem: ProblemInstance,
    generator: GeneratorBackend,
    oracle: RewardOracle,
) -> float:
    answer = generation.conclude(node.state, generator)
    node.sim_count += 1
    return oracle.evaluate(problem, answer)


def _backpropagate(node: TreeNode, reward_value: float) -> None:
    current: TreeNode | None = node
    while current is not None:
        current.n += 1
        current.v += reward_value
        current = current.parent


# ------------------------------------------------------------ pair extraction


def _children_critic_kind(parent: TreeNode) -> CriticKind:
    if parent.state.pending_subgoal() is ObservationKind.REASON:
        return CriticKind.RATIONALE
    if parent.state.pending_subgoal() is ObservationKind.GENQUERY:
        return CriticKind.QUERY
    if parent.state.pending_subgoal() is ObservationKind.RETRIEVE:
        return CriticKind.DOC
    return CriticKind.SUBGOAL


def extract_pairs(
    root: TreeNode,
    problem: ProblemInstance,
    max_rejected_per_group: int | None = None,
) -> dict[CriticKind, list[PreferencePair]]:
    """Mine preference pairs from every sibling group with >= 2 visited children.

    Children are scored by mean value v/n (ties: higher n, then earlier
    materialization); the top child is chosen and one pair is emitted per
    strictly lower-scored sibling. `max_rejected_per_group` optionally keeps
    only the highest-scored rejected siblings.
    """
    out: dict[CriticKind, list[PreferencePair]] = {kind: [] for kind in CriticKind}
    for parent in root.walk():
        visited = [c for c in parent.children if c.n >= 1]
        if len(visited) < 2:
            continue
        ranked = sorted(
            enumerate(visited), key=lambda pair: (-pair[1].mean_value, -pair[1].n, pair[0])
        )
        chosen = ranked[0][1]
        rejected = [c for _, c in ranked[1:] if c.mean_value < chosen.mean_value]
        if max_rejected_per_group is not None:
            rejected = rejected[:max_rejected_per_group]
        if not rejected:
            continue
        kind = _children_critic_kind(parent)
        context = build_context(parent.state, kind, chosen.observation)
        for sibling in rejected:
            out[kind].append(
                PreferencePair(
                    kind=kind,
                    problem_id=problem.problem_id,
                    context_observations=context.context_observations,
                    chosen=chosen.observation,
                    rejected=sibling.observation,
                    chosen_value=chosen.mean_value,
                    rejected_value=sibling.mean_value,
                    chosen_visits=chosen.n,
                    rejected_visits=sibling.n,
                )
            )
    return out


# ------------------------------------------------------------------ tree dump


def dump_tree(root: TreeNode, path) -> None:
    """Write one JSON line per node (preorder ids) after a timestamp header."""
    header = {
        "format": TREE_DUMP_FORMAT,
        "version": TREE_DUMP_VERSION,
        "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    lines = [json.dumps(header, ensure_ascii=False, separators=(",", ":"))]
    ids: dict[int, int] = {}
    for node_id, node in enumerate(root.walk()):
        ids[id(node)] = node_id
        record = {
            "node": node_id,
            "parent": ids[id(node.parent)] if node.parent is not None else None,
            "kind": node.observation.kind.value if node.observation else "root",
            "digest": text_digest(node.observation.text) if node.observation else "",
            "v": node.v,
            "n": node.n,
        }
        lines.append(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
