from __future__ import annotations

import pytest

from criticplan.mdp import (
    ChooseCandidate,
    ChooseSubGoal,
    Observation,
    ObservationKind,
    ProblemInstance,
    SubGoal,
    apply,
    root_state,
    subgoal_observation,
)


@pytest.fixture
def problem() -> ProblemInstance:
    return ProblemInstance(
        problem_id="p1",
        statement="what is one plus one?",
        gold_label="two",
    )


def advance_subgoal(state, target: SubGoal):
    action = ChooseSubGoal(target)
    return apply(state, action, subgoal_observation(action))


def advance_candidate(state, observation: Observation, index: int = 0):
    action = ChooseCandidate(index, observation)
    return apply(state, action, observation)


def rationale(text: str) -> Observation:
    return Observation(kind=ObservationKind.RATIONALE, text=text)


def query(text: str) -> Observation:
    return Observation(kind=ObservationKind.QUERY, text=text)


def doc(text: str, doc_id: str) -> Observation:
    return Observation(kind=ObservationKind.DOC, text=text, doc_id=doc_id)


@pytest.fixture
def state_after_rationale(problem):
    state = advance_subgoal(root_state(problem), SubGoal.REASONING)
    return advance_candidate(state, rationale("the sum is computed by counting"))


@pytest.fixture
def state_after_query(problem):
    state = advance_subgoal(root_state(problem), SubGoal.REASONING)
    state = advance_candidate(state, rationale("the sum is computed by counting"))
    state = advance_subgoal(state, SubGoal.QUERYING)
    return advance_candidate(state, query("integer addition basics"))
