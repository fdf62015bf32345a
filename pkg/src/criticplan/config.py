"""Engine configuration: one JSON file, strict keys, environment overrides.

Endpoints and secrets can be overridden without editing the file:
CRITICPLAN_GENERATOR_URL replaces generator.url and CRITICPLAN_CRITIC_URL
replaces critics.url.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .generation import SamplingConfig
from .mcts import MctsConfig
from .mdp import answer_detector_from_spec
from .planner import PlannerConfig

GENERATOR_URL_ENV = "CRITICPLAN_GENERATOR_URL"
CRITIC_URL_ENV = "CRITICPLAN_CRITIC_URL"

# Allowed keys per section; anything else is rejected so typos fail loudly.
_SCHEMA: dict[str, set[str] | None] = {
    "paths": {
        "corpus_dir", "index_path", "pairs_dir", "critics_dir",
        "problems_file", "output_dir", "judgments_file",
    },
    "generator": {"type", "path", "url", "timeout", "retries", "seed"},
    "critics": {"type", "url", "timeout", "dim"},
    "oracle": {"type", "command", "timeout"},
    "answer_detector": {"type", "sentinel", "pattern"},
    "sampling": {"k", "temperature"},
    "retrieval": {"k1", "b"},
    "mcts": {"iterations", "exploration", "horizon"},
    "planner": {"horizon", "final_retrieval_k"},
    "training": {"epochs", "learning_rate"},
    "checker": {"type", "command", "timeout"},
    "seed": None,
}


@dataclass(frozen=True)
class EngineConfig:
    paths: dict = field(default_factory=dict)
    generator: dict = field(default_factory=lambda: {"type": "scripted"})
    critics: dict = field(default_factory=lambda: {"type": "trained"})
    oracle: dict = field(default_factory=lambda: {"type": "exact_match"})
    answer_detector: dict = field(default_factory=lambda: {"type": "sentinel"})
    sampling: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)
    mcts: dict = field(default_factory=dict)
    planner: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    checker: dict = field(default_factory=lambda: {"type": "exact_match"})
    seed: int = 0

    def path(self, name: str) -> Path:
        if name not in self.paths:
            raise ConfigurationError(f"config is missing paths.{name}")
        return Path(self.paths[name])

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(
            k=self.sampling.get("k", 3),
            temperature=self.sampling.get("temperature", 0.7),
        )

    def mcts_config(self) -> MctsConfig:
        return MctsConfig(
            iterations=self.mcts.get("iterations", 32),
            exploration=self.mcts.get("exploration", 2.0 ** 0.5),
            sampling=self.sampling_config(),
            horizon=self.mcts.get("horizon", 24),
            seed=self.seed,
        )

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            horizon=self.planner.get("horizon", 24),
            sampling=self.sampling_config(),
            answer_detector=answer_detector_from_spec(self.answer_detector),
            final_retrieval_k=self.planner.get("final_retrieval_k", 10),
        )

    def resolved(self) -> dict:
        """Plain mapping echoed by every command for provenance."""
        return {
            "paths": dict(self.paths),
            "generator": dict(self.generator),
            "critics": dict(self.critics),
            "oracle": dict(self.oracle),
            "answer_detector": dict(self.answer_detector),
            "sampling": dict(self.sampling),
            "retrieval": dict(self.retrieval),
            "mcts": dict(self.mcts),
            "planner": dict(self.planner),
            "training": dict(self.training),
            "checker": dict(self.checker),
            "seed": self.seed,
        }


def load_engine_config(path, environ: dict | None = None) -> EngineConfig:
    environ = os.environ if environ is None else environ
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except ValueError as err:
        raise ConfigurationError(f"{path}: invalid JSON: {err}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    for key, value in data.items():
        if key not in _SCHEMA:
            raise ConfigurationError(f"{path}: unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is not None:
            if not isinstance(value, dict):
                raise ConfigurationError(f"{path}: {key} must be an object")
            for sub in value:
                if sub not in allowed:
                    raise ConfigurationError(
                        f"{path}: unknown config key {key}.{sub!r}"
                    )
    config = EngineConfig(**data)
    if environ.get(GENERATOR_URL_ENV):
        config.generator["url"] = environ[GENERATOR_URL_ENV]
    if environ.get(CRITIC_URL_ENV):
        config.critics["url"] = environ[CRITIC_URL_ENV]
    return config
