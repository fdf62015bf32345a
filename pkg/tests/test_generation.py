from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from criticplan.errors import (
    BackendError,
    ContractViolationError,
    EmptyCandidatesError,
    MissingRationaleError,
)
from criticplan.generation import (
    HttpGeneratorBackend,
    PromptTemplate,
    SamplingConfig,
    ScriptedBackend,
    ScriptedRule,
    conclude,
    load_template,
    render_conclusion_prompt,
    render_query_prompt,
    render_rationale_prompt,
    sample_queries,
    sample_rationales,
    write_scripted_backend,
)
from criticplan.mdp import ObservationKind, SubGoal, root_state
from tests.conftest import advance_candidate, advance_subgoal, doc, rationale


def scripted(candidates, conclusion="done"):
    return ScriptedBackend(
        sample_rules=[ScriptedRule(match=(), candidates=tuple(candidates))],
        default_conclusion=conclusion,
    )


class FailingBackend:
    def __init__(self, failures: int, then: list[str] | None = None):
        self.failures = failures
        self.then = then or ["recovered"]
        self.calls = 0

    def sample(self, prompt, k, temperature):
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendError("transient")
        return list(self.then)

    def conclude(self, prompt):
        self.calls += 1
        if self.calls <= self.failures:
            raise BackendError("transient")
        return self.then[0]


class TestSamplingConfig:
    def test_defaults(self):
        cfg = SamplingConfig()
        assert cfg.k == 3
        assert cfg.temperature == 0.7

    def test_invalid_k(self):
        with pytest.raises(ContractViolationError):
            SamplingConfig(k=0)


class TestTemplates:
    def test_missing_placeholder_fails(self):
        template = PromptTemplate(template_id="t", body="hello {name}")
        with pytest.raises(ContractViolationError):
            template.render(other="x")

    def test_render(self):
        template = PromptTemplate(template_id="t", body="hello {name}")
        assert template.render(name="world") == "hello world"

    def test_packaged_templates_load(self):
        for template_id in ("rationale", "query"):
            template = load_template(template_id)
            assert template.body

    def test_rationale_prompt_is_pure(self, state_after_rationale):
        state = advance_subgoal(state_after_rationale, SubGoal.REASONING)
        assert render_rationale_prompt(state) == render_rationale_prompt(state)

    def test_rationale_prompt_includes_docs_and_rationales(self, state_after_query):
        state = advance_subgoal(state_after_query, SubGoal.RETRIEVING)
        state = advance_candidate(state, doc("document body", "d1"))
        state = advance_subgoal(state, SubGoal.REASONING)
        prompt = render_rationale_prompt(state)
        assert "[START PRECEDING RATIONALES]" in prompt
        assert "the sum is computed by counting" in prompt
        assert "document body" in prompt
        # queries are not part of the reasoning context
        assert "integer addition basics" not in prompt

    def test_root_rationale_prompt_has_no_preceding_block(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        assert "[START PRECEDING RATIONALES]" not in render_rationale_prompt(state)

    def test_query_prompt_uses_last_rationale(self, state_after_rationale):
        state = advance_subgoal(state_after_rationale, SubGoal.QUERYING)
        prompt = render_query_prompt(state)
        assert "the sum is computed by counting" in prompt
        assert "[BEGIN REASON]" in prompt

    def test_conclusion_prompt_empty_trajectory_is_statement_only(self, problem):
        assert render_conclusion_prompt(root_state(problem)) == problem.statement

    def test_conclusion_prompt_appends_history(self, state_after_rationale):
        prompt = render_conclusion_prompt(state_after_rationale)
        assert prompt.startswith(state_after_rationale.problem.statement)
        assert "the sum is computed by counting" in prompt


class TestSampleRationales:
    def test_passthrough_in_backend_order(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = scripted(["first", "second", "third"])
        observations = sample_rationales(state, backend, SamplingConfig())
        assert [o.text for o in observations] == ["first", "second", "third"]
        assert all(o.kind is ObservationKind.RATIONALE for o in observations)

    def test_dedup(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = scripted(["A", "A", "B"])
        observations = sample_rationales(state, backend, SamplingConfig())
        assert [o.text for o in observations] == ["A", "B"]

    def test_delimiters_stripped(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = scripted(["[BEGIN REASON] the step [END REASON]"])
        observations = sample_rationales(state, backend, SamplingConfig())
        assert observations[0].text == "the step"

    def test_tolerates_missing_delimiters(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = scripted(["no markers at all"])
        observations = sample_rationales(state, backend, SamplingConfig())
        assert observations[0].text == "no markers at all"

    def test_empty_candidates_error(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = scripted([""])
        with pytest.raises(EmptyCandidatesError):
            sample_rationales(state, backend, SamplingConfig())

    def test_wrong_pending_subgoal(self, state_after_rationale):
        state = advance_subgoal(state_after_rationale, SubGoal.QUERYING)
        with pytest.raises(ContractViolationError):
            sample_rationales(state, scripted(["x"]), SamplingConfig())

    def test_transient_failures_retried(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = FailingBackend(failures=2, then=["ok"])
        observations = sample_rationales(state, backend, SamplingConfig())
        assert [o.text for o in observations] == ["ok"]
        assert backend.calls == 3

    def test_persistent_failure_surfaces(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = FailingBackend(failures=10)
        with pytest.raises(BackendError):
            sample_rationales(state, backend, SamplingConfig())
        assert backend.calls == 3

    def test_candidate_count_capped_at_k(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.REASONING)
        backend = scripted(["a", "b", "c", "d", "e"])
        observations = sample_rationales(state, backend, SamplingConfig(k=5))
        assert len(observations) == 5
        observations = sample_rationales(state, backend, SamplingConfig(k=2))
        assert len(observations) == 2


class TestSampleQueries:
    def test_single_candidate(self, state_after_rationale):
        state = advance_subgoal(state_after_rationale, SubGoal.QUERYING)
        backend = scripted(["[BEGIN QUERY] lookup terms [END QUERY]"])
        observations = sample_queries(state, backend, SamplingConfig())
        assert [o.text for o in observations] == ["lookup terms"]
        assert observations[0].kind is ObservationKind.QUERY

    def test_missing_rationale(self, problem):
        state = advance_subgoal(root_state(problem), SubGoal.QUERYING)
        with pytest.raises(MissingRationaleError):
            sample_queries(state, scripted(["q"]), SamplingConfig())

    def test_timeout_on_all_retries(self, state_after_rationale):
        state = advance_subgoal(state_after_rationale, SubGoal.QUERYING)
        with pytest.raises(BackendError):
            sample_queries(state, FailingBackend(failures=99), SamplingConfig())


class TestConclude:
    def test_keyed_scripted_answer(self, state_after_rationale):
        backend = ScriptedBackend(
            conclude_rules=[
                ScriptedRule(match=("computed by counting",), response="two")
            ],
            default_conclusion="unknown",
        )
        assert conclude(state_after_rationale, backend) == "two"

    def test_default_conclusion(self, problem):
        backend = ScriptedBackend(default_conclusion="fallback")
        assert conclude(root_state(problem), backend) == "fallback"


class TestScriptedBackendFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "backend.json"
        write_scripted_backend(
            path,
            sample_rules=[{"match": ["alpha"], "candidates": ["one", "two"]}],
            conclude_rules=[{"match": ["alpha", "one"], "response": "answer"}],
            default_conclusion="dunno",
        )
        backend = ScriptedBackend.from_file(path)
        assert backend.sample("prompt with alpha", 3, 0.7) == ["one", "two"]
        assert backend.conclude("alpha then one") == "answer"
        assert backend.conclude("nothing matches") == "dunno"

    def test_no_matching_rule_is_backend_error(self):
        backend = ScriptedBackend()
        with pytest.raises(BackendError):
            backend.sample("anything", 3, 0.7)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        length = int(self.headers["Content-Length"])
        request = json.loads(self.rfile.read(length))
        self.server.requests.append(request)
        body = json.dumps(
            {"candidates": [f"echo:{request['prompt']}:{i}" for i in range(request["k"])]}
        ).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def http_server():
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield server
    server.shutdown()


class TestHttpBackend:
    def test_sample_wire_format(self, http_server):
        url = f"http://127.0.0.1:{http_server.server_address[1]}/"
        backend = HttpGeneratorBackend(base_url=url, seed=7)
        result = backend.sample("hello", 2, 0.7)
        assert result == ["echo:hello:0", "echo:hello:1"]
        request = http_server.requests[0]
        assert request == {"prompt": "hello", "k": 2, "temperature": 0.7, "seed": 7}

    def test_conclude_uses_k_1(self, http_server):
        url = f"http://127.0.0.1:{http_server.server_address[1]}/"
        backend = HttpGeneratorBackend(base_url=url)
        assert backend.conclude("finish") == "echo:finish:0"
        assert http_server.requests[-1]["k"] == 1

    def test_unreachable_endpoint_is_backend_error(self):
        backend = HttpGeneratorBackend(base_url="http://127.0.0.1:1/", timeout=0.2)
        with pytest.raises(BackendError):
            backend.sample("x", 1, 0.0)


class TestWalkthroughSampling:
    def test_first_reasoning_round_offers_the_linear_time_rationale(self):
        from criticplan.mdp import root_state
        from tests import _walkthrough

        state = advance_subgoal(root_state(_walkthrough.PROBLEM), SubGoal.REASONING)
        observations = sample_rationales(state, _walkthrough.backend(), SamplingConfig(k=3))
        assert "The optimal time complexity is O(n)" in [o.text for o in observations]

    def test_query_round_offers_the_reformulated_query(self):
        from criticplan.mdp import root_state
        from tests import _walkthrough

        state = advance_subgoal(root_state(_walkthrough.PROBLEM), SubGoal.REASONING)
        state = advance_candidate(state, rationale("The optimal time complexity is O(n)"))
        state = advance_subgoal(state, SubGoal.QUERYING)
        observations = sample_queries(state, _walkthrough.backend(), SamplingConfig(k=3))
        assert (
            "Max length substring with unique characters with O(n) complexity"
            in [o.text for o in observations]
        )
