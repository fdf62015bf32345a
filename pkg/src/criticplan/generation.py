"""Candidate generation: backends, prompt rendering, and sampling operations.

The generator backend is pluggable. A scripted backend (rule table over prompt
contents) supports fully offline, deterministic runs; an HTTP backend speaks a
minimal JSON protocol for real model servers.
"""

from __future__ import annotations

import json
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Protocol, Sequence

from .errors import (
    BackendError,
    ContractViolationError,
    EmptyCandidatesError,
    MissingRationaleError,
)
from .mdp import Observation, ObservationKind, State

DEFAULT_K = 3
DEFAULT_TEMPERATURE = 0.7

# Bounded retries for transient backend failures before the error surfaces.
BACKEND_ATTEMPTS = 3

REASON_BEGIN, REASON_END = "[BEGIN REASON]", "[END REASON]"
QUERY_BEGIN, QUERY_END = "[BEGIN QUERY]", "[END QUERY]"


@dataclass(frozen=True)
class SamplingConfig:
    k: int = DEFAULT_K
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.k < 1:
            raise ContractViolationError("sampling k must be >= 1")
        if self.temperature < 0:
            raise ContractViolationError("temperature must be >= 0")


class GeneratorBackend(Protocol):
    """Contract for candidate samplers.

    `sample` returns between 1 and k non-empty strings; `conclude` returns a
    single completion. Backends that support seeding must be deterministic for
    a fixed seed.
    """

    def sample(self, prompt: str, k: int, temperature: float) -> list[str]: ...

    def conclude(self, prompt: str) -> str: ...


_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Text template with {name} placeholders; rendering is strict."""

    template_id: str
    body: str

    def render(self, **values: str) -> str:
        def substitute(match: re.Match) -> str:
            name = match.group(1)
            if name not in values:
                raise ContractViolationError(
                    f"template {self.template_id!r} references missing "
                    f"placeholder {name!r}"
                )
            return values[name]

        return _PLACEHOLDER.sub(substitute, self.body)


def load_template(template_id: str) -> PromptTemplate:
    """Load a packaged prompt asset by id (e.g. 'rationale', 'query')."""
    body = (
        resources.files("criticplan.prompts").joinpath(f"{template_id}.txt").read_text()
    )
    return PromptTemplate(template_id=template_id, body=body)


def _preceding_rationales_block(state: State) -> str:
    texts = [
        obs.text
        for obs in state.observations
        if obs.kind in (ObservationKind.RATIONALE, ObservationKind.DOC)
    ]
    if not texts:
        return ""
    joined = "\n\n".join(texts)
    return f"\n[START PRECEDING RATIONALES]\n{joined}\n[END PRECEDING RATIONALES]\n"


def render_rationale_prompt(state: State, template: PromptTemplate | None = None) -> str:
    """Problem statement plus prior rationales and documents, in trajectory order."""
    template = template or load_template("rationale")
    return template.render(
        problem=state.problem.statement,
        preceding_rationales=_preceding_rationales_block(state),
    )


def _last_rationale(state: State) -> Observation | None:
    for obs in reversed(state.observations):
        if obs.kind is ObservationKind.RATIONALE:
            return obs
    return None


def render_query_prompt(state: State, template: PromptTemplate | None = None) -> str:
    """Query-generation prompt built from the immediately preceding rationale."""
    template = template or load_template("query")
    rationale = _last_rationale(state)
    if rationale is None:
        raise MissingRationaleError("query generation requires a preceding rationale")
    return template.render(last_rationale=rationale.text)


def render_conclusion_prompt(state: State) -> str:
    """Problem statement followed by the full observation history.

    With an empty trajectory the prompt is exactly the problem statement.
    """
    parts = [state.problem.statement]
    parts.extend(obs.text for obs in state.observations)
    return "\n\n".join(parts)


def _strip_delimiters(text: str, begin: str, end: str) -> str:
    """Remove generation delimiters; tolerant of drift (missing markers)."""
    stripped = text.strip()
    if begin in stripped:
        stripped = stripped.split(begin, 1)[1]
    if end in stripped:
        stripped = stripped.rsplit(end, 1)[0]
    return stripped.strip()


def _call_with_retries(backend: GeneratorBackend, prompt: str, k: int, temperature: float) -> list[str]:
    last_error: BackendError | None = None
    for _ in range(BACKEND_ATTEMPTS):
        try:
            return backend.sample(prompt, k, temperature)
        except BackendError as err:
            last_error = err
    raise last_error


def _dedup(texts: Sequence[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for t in texts:
        if t and t not in seen:
            seen.add(t)
            out.append(t)
    return out


def _sample_observations(
    state: State,
    backend: GeneratorBackend,
    cfg: SamplingConfig,
    render,
    begin: str,
    end: str,
    kind: ObservationKind,
) -> list[Observation]:
    prompt = render(state)
    raw = _call_with_retries(backend, prompt, cfg.k, cfg.temperature)
    texts = _dedup([_strip_delimiters(t, begin, end) for t in raw])
    if not texts:
        raise EmptyCandidatesError(f"no usable {kind.value} candidates after stripping")
    return [Observation(kind=kind, text=t) for t in texts[: cfg.k]]


def sample_rationales(
    state: State, backend: GeneratorBackend, cfg: SamplingConfig
) -> list[Observation]:
    """Sample candidate rationales for a pending Reason sub-goal."""
    if state.pending_subgoal() is not ObservationKind.REASON:
        raise ContractViolationError("state must end in a Reason sub-goal observation")
    return _sample_observations(
        state, backend, cfg, render_rationale_prompt, REASON_BEGIN, REASON_END,
        ObservationKind.RATIONALE,
    )


def sample_queries(
    state: State, backend: GeneratorBackend, cfg: SamplingConfig
) -> list[Observation]:
    """Sample candidate search queries for a pending GenQuery sub-goal."""
    if state.pending_subgoal() is not ObservationKind.GENQUERY:
        raise ContractViolationError("state must end in a GenQuery sub-goal observation")
    if _last_rationale(state) is None:
        raise MissingRationaleError("query generation requires a preceding rationale")
    return _sample_observations(
        state, backend, cfg, render_query_prompt, QUERY_BEGIN, QUERY_END,
        ObservationKind.QUERY,
    )


def conclude(state: State, backend: GeneratorBackend) -> str:
    """Generate a final answer from the observations collected so far."""
    prompt = render_conclusion_prompt(state)
    last_error: BackendError | None = None
    for _ in range(BACKEND_ATTEMPTS):
        try:
            return backend.conclude(prompt)
        except BackendError as err:
            last_error = err
    raise last_error


# --------------------------------------------------------------------- backends


@dataclass(frozen=True)
class ScriptedRule:
    """First-match rule: all `match` substrings must occur in the prompt."""

    match: tuple[str, ...]
    candidates: tuple[str, ...] = ()
    response: str | None = None

    def matches(self, prompt: str) -> bool:
        return all(m in prompt for m in self.match)


def _as_rule(entry: dict, *, for_conclude: bool) -> ScriptedRule:
    match = entry["match"]
    if isinstance(match, str):
        match = [match]
    if for_conclude:
        return ScriptedRule(match=tuple(match), response=entry["response"])
    return ScriptedRule(match=tuple(match), candidates=tuple(entry["candidates"]))


@dataclass
class ScriptedBackend:
    """Deterministic lookup backend for offline runs and tests.

    Rules are scanned in order; the first whose substrings all occur in the
    prompt wins. A rule with an empty candidate list models a backend that has
    nothing useful to say (the caller surfaces an empty-candidates error).
    """

    sample_rules: list[ScriptedRule] = field(default_factory=list)
    conclude_rules: list[ScriptedRule] = field(default_factory=list)
    default_conclusion: str | None = None

    def sample(self, prompt: str, k: int, temperature: float) -> list[str]:
        for rule in self.sample_rules:
            if rule.matches(prompt):
                return list(rule.candidates[:k])
        raise BackendError("no scripted sampling rule matches the prompt")

    def conclude(self, prompt: str) -> str:
        for rule in self.conclude_rules:
            if rule.matches(prompt):
                return rule.response
        if self.default_conclusion is not None:
            return self.default_conclusion
        raise BackendError("no scripted conclusion rule matches the prompt")

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("format") != "scripted-generator" or data.get("version") != 1:
            raise BackendError(f"{path}: not a scripted-generator v1 file")
        return cls(
            sample_rules=[_as_rule(e, for_conclude=False) for e in data.get("sample", [])],
            conclude_rules=[_as_rule(e, for_conclude=True) for e in data.get("conclude", [])],
            default_conclusion=data.get("default_conclusion"),
        )


def write_scripted_backend(
    path,
    sample_rules: Sequence[dict],
    conclude_rules: Sequence[dict],
    default_conclusion: str | None = None,
) -> None:
    """Persist a scripted backend rule table to its JSON file format."""
    payload = {
        "format": "scripted-generator",
        "version": 1,
        "sample": list(sample_rules),
        "conclude": list(conclude_rules),
        "default_conclusion": default_conclusion,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


@dataclass(frozen=True)
class HttpGeneratorBackend:
    """Remote generator speaking the minimal JSON protocol.

    Request: {"prompt": str, "k": int, "temperature": float, "seed": int?}
    Response: {"candidates": [str, ...]}; conclude uses k = 1. Timeout and
    per-call retry count come from the engine config.
    """

    base_url: str
    timeout: float = 30.0
    retries: int = 2
    seed: int | None = None

    def _post(self, payload: dict) -> dict:
        body = json.dumps(payload).encode("utf-8")
        request = urllib.request.Request(
            self.base_url, data=body, headers={"Content-Type": "application/json"}
        )
        last_error: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as response:
                    return json.loads(response.read().decode("utf-8"))
            except (urllib.error.URLError, TimeoutError, ValueError) as err:
                last_error = err
        raise BackendError(f"generator endpoint failed: {last_error}") from last_error

    def sample(self, prompt: str, k: int, temperature: float) -> list[str]:
        payload = {"prompt": prompt, "k": k, "temperature": temperature}
        if self.seed is not None:
            payload["seed"] = self.seed
        data = self._post(payload)
        candidates = data.get("candidates")
        if not isinstance(candidates, list):
            raise BackendError("generator response missing 'candidates' list")
        return [str(c) for c in candidates]

    def conclude(self, prompt: str) -> str:
        candidates = self.sample(prompt, 1, 0.0)
        if not candidates:
            raise BackendError("generator returned no conclusion")
        return candidates[0]
