"""Inference loop: alternate critic-guided sub-goal and execution selection.

Each outer step scores the legal sub-goal markers, commits to the best one,
obtains execution candidates for it (sampling or retrieval), scores those, and
commits to the best candidate. A sub-goal whose candidate set comes back empty
is masked at that decision and the selection re-runs; a decision with every
sub-goal masked is a planning failure. Every candidate, score, and choice is
recorded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from . import generation, retrieval
from .critics import CriticBackend, CriticKind, reward
from .errors import (
    ContractViolationError,
    EmptyCandidatesError,
    EmptyQueryError,
    MissingRationaleError,
    PlanningFailureError,
)
from .generation import GeneratorBackend, SamplingConfig
from .mdp import (
    AnswerDetector,
    ChooseCandidate,
    ChooseSubGoal,
    Observation,
    ObservationKind,
    ProblemInstance,
    SentinelAnswerDetector,
    State,
    SubGoal,
    TaskKind,
    apply,
    is_terminal,
    root_state,
    subgoal_actions,
    subgoal_observation,
    text_digest,
)


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 24
    sampling: SamplingConfig = SamplingConfig()
    answer_detector: AnswerDetector = SentinelAnswerDetector()
    final_retrieval_k: int = 10

    def __post_init__(self):
        if self.horizon < 2:
            raise ContractViolationError("horizon must be >= 2")
        if self.final_retrieval_k < 1:
            raise ContractViolationError("final_retrieval_k must be >= 1")


@dataclass(frozen=True)
class ScoredCandidate:
    index: int
    digest: str
    score: float
    chosen: bool
    label: str


@dataclass(frozen=True)
class DecisionRecord:
    """One scored decision: either a sub-goal choice or a candidate choice."""

    step: int
    kind: str
    candidates: tuple[ScoredCandidate, ...]
    masked: tuple[str, ...] = ()


class TerminationReason(Enum):
    ANSWER_DETECTED = "answer_detected"
    HORIZON_FORCED = "horizon_forced"


@dataclass(frozen=True)
class SolveResult:
    problem_id: str
    final_answer: str
    terminated_by: TerminationReason
    trajectory: State
    decisions: tuple[DecisionRecord, ...]


@dataclass(frozen=True)
class RankingResult:
    problem_id: str
    doc_ids: tuple[str, ...]
    query_used: str
    fallback: bool
    trajectory: State
    decisions: tuple[DecisionRecord, ...]


@dataclass
class _Loop:
    """Decision machinery shared by the answer and ranking solve variants."""

    problem: ProblemInstance
    critics: Mapping[CriticKind, CriticBackend]
    generator: GeneratorBackend
    corpus: retrieval.Corpus | None
    cfg: PlannerConfig
    decisions: list[DecisionRecord] = field(default_factory=list)
    best_query: tuple[float, str] | None = None
    # Set by step(retrieve_is_final=True) when the critics commit to Retrieve;
    # the ranking variant stops there and runs the final retrieval itself.
    final_retrieve: State | None = None

    def score_subgoals(self, state: State, masked: set[SubGoal]) -> list[tuple[ChooseSubGoal, float]]:
        actions = [a for a in subgoal_actions(state) if a.target not in masked]
        return [(a, reward(state, a, self.critics)) for a in actions]

    def pick_best(self, scored):
        best_index = 0
        for i in range(1, len(scored)):
            if scored[i][1] > scored[best_index][1]:
                best_index = i
        return best_index

    def record_subgoal_decision(self, state, scored, best_index, masked) -> None:
        self.decisions.append(
            DecisionRecord(
                step=state.step_index + 1,
                kind="subgoal",
                candidates=tuple(
                    ScoredCandidate(
                        index=i,
                        digest=text_digest(subgoal_observation(a).text),
                        score=s,
                        chosen=(i == best_index),
                        label=a.target.value,
                    )
                    for i, (a, s) in enumerate(scored)
                ),
                masked=tuple(sorted(m.value for m in masked)),
            )
        )

    def obtain_candidates(self, state: State) -> list[Observation]:
        pending = state.pending_subgoal()
        if pending is ObservationKind.REASON:
            return generation.sample_rationales(state, self.generator, self.cfg.sampling)
        if pending is ObservationKind.GENQUERY:
            return generation.sample_queries(state, self.generator, self.cfg.sampling)
        if self.corpus is None:
            raise ContractViolationError("retrieval selected but no corpus configured")
        query = next(
            obs.text
            for obs in reversed(state.observations)
            if obs.kind is ObservationKind.QUERY
        )
        return retrieval.retrieve(self.corpus, query, self.cfg.sampling.k)

    def choose_candidate(self, state: State, candidates: list[Observation]) -> State:
        actions = [ChooseCandidate(i, obs) for i, obs in enumerate(candidates)]
        scored = [(a, reward(state, a, self.critics)) for a in actions]
        best_index = self.pick_best(scored)
        kind = state.pending_subgoal()
        if kind is ObservationKind.GENQUERY:
            for action, score in scored:
                if self.best_query is None or score > self.best_query[0]:
                    self.best_query = (score, action.candidate.text)
        self.decisions.append(
            DecisionRecord(
                step=state.step_index + 1,
                kind=generation_kind_label(kind),
                candidates=tuple(
                    ScoredCandidate(
                        index=i,
                        digest=text_digest(a.candidate.text),
                        score=s,
                        chosen=(i == best_index),
                        label=a.candidate.doc_id or "",
                    )
                    for i, (a, s) in enumerate(scored)
                ),
            )
        )
        action = scored[best_index][0]
        return apply(state, action, action.candidate)

    def step(self, state: State, retrieve_is_final: bool = False) -> State:
        """Run one sub-goal + execution round and return the new state.

        Sub-goals whose candidate set comes back empty are masked at this
        decision and selection re-runs; all-masked is a planning failure.
        """
        masked: set[SubGoal] = set()
        while True:
            scored = self.score_subgoals(state, masked)
            if not scored:
                raise PlanningFailureError(
                    f"every sub-goal masked at step {state.step_index}"
                )
            best_index = self.pick_best(scored)
            action = scored[best_index][0]
            marker = subgoal_observation(action)
            after_marker = apply(state, action, marker)
            if retrieve_is_final and action.target is SubGoal.RETRIEVING:
                self.record_subgoal_decision(state, scored, best_index, masked)
                self.final_retrieve = after_marker
                return after_marker
            if is_terminal(after_marker, self.cfg.answer_detector):
                self.record_subgoal_decision(state, scored, best_index, masked)
                return after_marker
            try:
                candidates = self.obtain_candidates(after_marker)
            except (EmptyCandidatesError, MissingRationaleError, EmptyQueryError):
                candidates = []
            if not candidates:
                masked.add(action.target)
                continue
            self.record_subgoal_decision(state, scored, best_index, masked)
            return self.choose_candidate(after_marker, candidates)


def generation_kind_label(kind: ObservationKind | None) -> str:
    if kind is ObservationKind.REASON:
        return "rationale"
    if kind is ObservationKind.GENQUERY:
        return "query"
    return "doc"


def solve(
    problem: ProblemInstance,
    critics: Mapping[CriticKind, CriticBackend],
    generator: GeneratorBackend,
    cfg: PlannerConfig,
    corpus: retrieval.Corpus | None = None,
) -> SolveResult:
    """Plan until an observation contains the answer or the horizon forces a
    conclusion."""
    loop = _Loop(problem=problem, critics=critics, generator=generator,
                 corpus=corpus, cfg=cfg)
    state = root_state(problem, horizon=cfg.horizon)
    while not is_terminal(state, cfg.answer_detector):
        state = loop.step(state)
    last = state.last_observation
    if last is not None and cfg.answer_detector(last):
        return SolveResult(
            problem_id=problem.problem_id,
            final_answer=last.text,
            terminated_by=TerminationReason.ANSWER_DETECTED,
            trajectory=state,
            decisions=tuple(loop.decisions),
        )
    return SolveResult(
        problem_id=problem.problem_id,
        final_answer=generation.conclude(state, generator),
        terminated_by=TerminationReason.HORIZON_FORCED,
        trajectory=state,
        decisions=tuple(loop.decisions),
    )


def solve_for_ranking(
    problem: ProblemInstance,
    critics: Mapping[CriticKind, CriticBackend],
    generator: GeneratorBackend,
    cfg: PlannerConfig,
    corpus: retrieval.Corpus,
) -> RankingResult:
    """Plan until the critics select a retrieval, then rank with the chosen query.

    The first critic-selected Retrieve is the final one: its query is run with
    `final_retrieval_k` results. If no Retrieve is selected within the horizon
    the best-scored generated query (or the problem statement) is used and the
    result is flagged as a fallback.
    """
    if problem.task_kind is not TaskKind.RETRIEVAL_RANKING:
        raise ContractViolationError("solve_for_ranking requires a retrieval_ranking task")
    loop = _Loop(problem=problem, critics=critics, generator=generator,
                 corpus=corpus, cfg=cfg)
    state = root_state(problem, horizon=cfg.horizon)
    while not is_terminal(state, cfg.answer_detector):
        state = loop.step(state, retrieve_is_final=True)
        if loop.final_retrieve is not None:
            query = next(
                obs.text
                for obs in reversed(state.observations)
                if obs.kind is ObservationKind.QUERY
            )
            return _ranking_result(loop, problem, state, query, fallback=False)
    query = loop.best_query[1] if loop.best_query is not None else problem.statement
    return _ranking_result(loop, problem, state, query, fallback=True)


def _ranking_result(
    loop: _Loop, problem: ProblemInstance, state: State, query: str, fallback: bool
) -> RankingResult:
    try:
        hits = retrieval.retrieve_scored(loop.corpus, query, loop.cfg.final_retrieval_k)
    except EmptyQueryError:
        hits = []
    return RankingResult(
        problem_id=problem.problem_id,
        doc_ids=tuple(obs.doc_id for obs, _ in hits),
        query_used=query,
        fallback=fallback,
        trajectory=state,
        decisions=tuple(loop.decisions),
    )


# -------------------------------------------------------------------- logging


def decision_records(result: SolveResult | RankingResult) -> list[dict]:
    """Flat per-candidate records for the score-table log."""
    records = []
    for decision in result.decisions:
        for candidate in decision.candidates:
            records.append(
                {
                    "problem_id": result.problem_id,
                    "step": decision.step,
                    "kind": decision.kind,
                    "index": candidate.index,
                    "digest": candidate.digest,
                    "score": candidate.score,
                    "chosen": candidate.chosen,
                    "label": candidate.label,
                    "masked": list(decision.masked),
                }
            )
    return records


def format_decision_log(result: SolveResult | RankingResult) -> str:
    lines = [
        json.dumps(record, ensure_ascii=False, separators=(",", ":"))
        for record in decision_records(result)
    ]
    return "\n".join(lines) + ("\n" if lines else "")
