"""Command-line pipeline: index, collect, export-pairs, train-critic, solve, eval.

Every command echoes its resolved configuration and seed, writes deterministic
outputs (timestamps are confined to one header line per file), and exits
nonzero when a problem was skipped or an error occurred.
"""

from __future__ import annotations

import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import click

from . import critics as critics_mod
from . import evaluation, generation, mcts, planner, retrieval
from .config import EngineConfig, load_engine_config
from .critics import CriticKind, LinearCritic, import_pairs, pairs_filename
from .errors import ConfigurationError, CriticPlanError, SearchRunError
from .mdp import ProblemInstance, TaskKind, format_trajectory_log

logger = logging.getLogger(__name__)


def _header_line(format_name: str, seed: int) -> str:
    header = {
        "format": format_name,
        "version": 1,
        "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
    }
    return json.dumps(header, ensure_ascii=False, separators=(",", ":"))


def _echo_config(config: EngineConfig) -> None:
    click.echo("config: " + json.dumps(config.resolved(), sort_keys=True))
    click.echo(f"seed: {config.seed}")


def load_problems(path) -> list[ProblemInstance]:
    """Read {problem_id, statement, gold_label, task_kind} records."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"problems file not found: {path}")
    problems = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            problems.append(
                ProblemInstance(
                    problem_id=str(record["problem_id"]),
                    statement=record["statement"],
                    gold_label=record.get("gold_label", ""),
                    task_kind=TaskKind(record.get("task_kind", "answer_match")),
                )
            )
    return problems


def _generator_from_config(config: EngineConfig) -> generation.GeneratorBackend:
    spec = config.generator
    kind = spec.get("type", "scripted")
    if kind == "scripted":
        path = spec.get("path")
        if not path or not Path(path).exists():
            raise ConfigurationError(
                f"scripted generator file not found: {path!r} (set generator.path)"
            )
        return generation.ScriptedBackend.from_file(path)
    if kind == "http":
        if "url" not in spec:
            raise ConfigurationError("generator.url is required for an http generator")
        return generation.HttpGeneratorBackend(
            base_url=spec["url"],
            timeout=spec.get("timeout", 30.0),
            retries=spec.get("retries", 2),
            seed=spec.get("seed", config.seed),
        )
    raise ConfigurationError(f"unknown generator type {kind!r}")


class _CheckerOracle:
    """Adapts an answer checker into a {0, 1} reward oracle."""

    def __init__(self, checker: evaluation.AnswerChecker):
        self.checker = checker

    def evaluate(self, problem: ProblemInstance, final_answer: str) -> float:
        return 1.0 if self.checker.check(problem, final_answer) else 0.0


def _oracle_from_config(config: EngineConfig) -> mcts.RewardOracle:
    spec = config.oracle
    kind = spec.get("type", "exact_match")
    if kind == "exact_match":
        return mcts.ExactMatchOracle()
    if kind == "command":
        return _CheckerOracle(
            evaluation.ExternalCommandChecker(
                command=tuple(spec["command"]), timeout=spec.get("timeout", 60.0)
            )
        )
    raise ConfigurationError(f"unknown oracle type {kind!r}")


def _checker_from_config(config: EngineConfig) -> evaluation.AnswerChecker:
    spec = config.checker
    kind = spec.get("type", "exact_match")
    if kind == "exact_match":
        return evaluation.NormalizedExactMatchChecker()
    if kind == "command":
        return evaluation.ExternalCommandChecker(
            command=tuple(spec["command"]), timeout=spec.get("timeout", 60.0)
        )
    raise ConfigurationError(f"unknown checker type {kind!r}")


def _critics_from_config(config: EngineConfig, mode: str | None = None):
    kind = mode or config.critics.get("type", "trained")
    if kind == "constant":
        return {k: critics_mod.ConstantCritic(0.0) for k in CriticKind}
    if kind == "http":
        if "url" not in config.critics:
            raise ConfigurationError("critics.url is required for http critics")
        backend = critics_mod.HttpCritic(
            base_url=config.critics["url"], timeout=config.critics.get("timeout", 30.0)
        )
        return {k: backend for k in CriticKind}
    if kind == "trained":
        critics_dir = config.path("critics_dir")
        loaded = {}
        for critic_kind in CriticKind:
            path = critics_dir / f"critic_{critic_kind.value}.json"
            if not path.exists():
                raise ConfigurationError(
                    f"critic file not found: {path} (produce it with "
                    f"`criticplan train-critic {critic_kind.value}`)"
                )
            loaded[critic_kind] = LinearCritic.load(path)
        return loaded
    raise ConfigurationError(f"unknown critics type {kind!r}")


def _load_corpus(config: EngineConfig) -> retrieval.Corpus | None:
    if "index_path" not in config.paths:
        return None
    index_path = config.path("index_path")
    if not index_path.exists():
        raise ConfigurationError(
            f"index file not found: {index_path} (produce it with `criticplan index`)"
        )
    return retrieval.load_index(index_path)


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Engine config file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--parallel", type=int, default=1, show_default=True, help="Worker count for batch commands.")
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
@click.pass_context
def main(ctx: click.Context, config_path: str, seed: int | None, parallel: int, verbose: bool):
    """Critic-guided planning engine: indexing, data collection, training,
    solving, and evaluation."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING)
    config = load_engine_config(config_path)
    if seed is not None:
        config = EngineConfig(**{**config.resolved(), "seed": seed})
    ctx.obj = {"config": config, "parallel": max(1, parallel)}


@main.command()
@click.pass_context
def index(ctx: click.Context):
    """Build and persist the BM25 index from the configured corpus.

    The corpus is either a directory of *.txt files (doc ids are relative
    paths) or one line-delimited file of {id, text} records.
    """
    config: EngineConfig = ctx.obj["config"]
    _echo_config(config)
    corpus_dir = config.path("corpus_dir")
    if corpus_dir.is_file():
        documents = retrieval.ingest_jsonl(corpus_dir)
    else:
        documents = retrieval.ingest_directory(corpus_dir)
    if not documents:
        raise click.ClickException(f"no documents under {corpus_dir}")
    params = retrieval.Bm25Params(
        k1=config.retrieval.get("k1", 1.2), b=config.retrieval.get("b", 0.75)
    )
    corpus = retrieval.build_index(documents, params=params, corpus_id=corpus_dir.name)
    index_path = config.path("index_path")
    index_path.parent.mkdir(parents=True, exist_ok=True)
    new_bytes = retrieval.index_bytes(corpus)
    if index_path.exists() and index_path.read_bytes() == new_bytes:
        click.echo(f"index up to date: {index_path}")
    else:
        index_path.write_bytes(new_bytes)
        click.echo(f"index written: {index_path}")
    click.echo(f"documents: {len(corpus)}")
    click.echo(f"average_length: {corpus.avgdl:.6f}")


@main.command()
@click.option("--problems", "problems_path", type=click.Path(), default=None,
              help="Problem set file (defaults to paths.problems_file).")
@click.pass_context
def collect(ctx: click.Context, problems_path: str | None):
    """Run tree search per problem and append the extracted preference pairs."""
    config: EngineConfig = ctx.obj["config"]
    _echo_config(config)
    problems = load_problems(problems_path or config.path("problems_file"))
    generator = _generator_from_config(config)
    oracle = _oracle_from_config(config)
    corpus = _load_corpus(config) if "index_path" in config.paths else None
    cfg = config.mcts_config()
    detector = config.planner_config().answer_detector

    trees_dir = config.path("output_dir") / "trees"
    trees_dir.mkdir(parents=True, exist_ok=True)

    def run_one(problem: ProblemInstance):
        root = mcts.run_mcts(
            problem, generator, oracle, cfg, corpus=corpus, detector=detector
        )
        return root, mcts.extract_pairs(root, problem)

    problems = sorted(problems, key=lambda p: p.problem_id)
    skipped = []
    collected: dict[str, tuple] = {}
    with ThreadPoolExecutor(max_workers=ctx.obj["parallel"]) as pool:
        futures = {p.problem_id: pool.submit(run_one, p) for p in problems}
        for problem in problems:
            try:
                collected[problem.problem_id] = futures[problem.problem_id].result()
            except SearchRunError as err:
                skipped.append(problem.problem_id)
                click.echo(f"skipped {problem.problem_id}: {err}", err=True)

    counts = {kind: 0 for kind in CriticKind}
    pairs_dir = config.path("pairs_dir")
    for problem in problems:
        if problem.problem_id not in collected:
            continue
        root, pair_map = collected[problem.problem_id]
        mcts.dump_tree(root, trees_dir / f"{problem.problem_id}.tree.jsonl")
        all_pairs = [pair for pairs in pair_map.values() for pair in pairs]
        for kind, n in critics_mod.export_pairs(all_pairs, pairs_dir).items():
            counts[kind] += n
    for kind in CriticKind:
        click.echo(f"pairs[{kind.value}]: {counts[kind]}")
    if skipped:
        raise click.ClickException(f"skipped {len(skipped)} problem(s): {', '.join(skipped)}")


@main.command("export-pairs")
@click.option("--dest", required=True, type=click.Path(), help="Destination directory.")
@click.pass_context
def export_pairs_cmd(ctx: click.Context, dest: str):
    """Validate the collected pair files and re-export them for external trainers."""
    config: EngineConfig = ctx.obj["config"]
    _echo_config(config)
    pairs_dir = config.path("pairs_dir")
    exported_any = False
    for kind in CriticKind:
        source = pairs_dir / pairs_filename(kind)
        if not source.exists():
            continue
        pairs = import_pairs(source)
        if pairs:
            critics_mod.export_pairs(pairs, dest)
        exported_any = True
        click.echo(f"pairs[{kind.value}]: {len(pairs)}")
    if not exported_any:
        raise click.ClickException(
            f"no pair files under {pairs_dir} (produce them with `criticplan collect`)"
        )


@main.command("train-critic")
@click.argument("kind", type=click.Choice([k.value for k in CriticKind]))
@click.pass_context
def train_critic(ctx: click.Context, kind: str):
    """Train the reference critic for one kind from its collected pairs."""
    config: EngineConfig = ctx.obj["config"]
    _echo_config(config)
    critic_kind = CriticKind(kind)
    pairs_path = config.path("pairs_dir") / pairs_filename(critic_kind)
    if not pairs_path.exists():
        raise click.ClickException(
            f"pair file not found: {pairs_path} (produce it with `criticplan collect`)"
        )
    pairs = import_pairs(pairs_path)
    if not pairs:
        raise click.ClickException(f"{pairs_path} contains no pairs")
    critic = critics_mod.train_reference_critic(
        pairs,
        featurizer_spec=critics_mod.FeaturizerSpec(dim=config.critics.get("dim", 4096)),
        epochs=config.training.get("epochs", 200),
        learning_rate=config.training.get("learning_rate", 0.5),
        seed=config.seed,
    )
    critics_dir = config.path("critics_dir")
    critics_dir.mkdir(parents=True, exist_ok=True)
    out_path = critics_dir / f"critic_{kind}.json"
    critic.save(out_path)
    click.echo(f"critic written: {out_path}")
    click.echo(f"pairs: {len(pairs)}")
    click.echo(f"final_loss: {critic.training_loss[-1]:.6f}")
    click.echo(f"training_pairwise_accuracy: {critics_mod.pairwise_accuracy(critic, pairs):.6f}")


@main.command()
@click.option("--problems", "problems_path", type=click.Path(), default=None,
              help="Problem set file (defaults to paths.problems_file).")
@click.option("--critics", "critics_mode", type=click.Choice(["trained", "constant", "http"]),
              default=None, help="Override the critic backend type.")
@click.pass_context
def solve(ctx: click.Context, problems_path: str | None, critics_mode: str | None):
    """Solve every problem with critic-guided planning; write results and logs."""
    config: EngineConfig = ctx.obj["config"]
    _echo_config(config)
    problems = load_problems(problems_path or config.path("problems_file"))
    generator = _generator_from_config(config)
    critic_backends = _critics_from_config(config, critics_mode)
    corpus = _load_corpus(config) if "index_path" in config.paths else None
    cfg = config.planner_config()

    def run_one(problem: ProblemInstance):
        if problem.task_kind is TaskKind.RETRIEVAL_RANKING:
            if corpus is None:
                raise ConfigurationError(
                    "ranking tasks need paths.index_path (produce it with `criticplan index`)"
                )
            return planner.solve_for_ranking(problem, critic_backends, generator, cfg, corpus)
        return planner.solve(problem, critic_backends, generator, cfg, corpus=corpus)

    problems = sorted(problems, key=lambda p: p.problem_id)
    results: dict[str, object] = {}
    with ThreadPoolExecutor(max_workers=ctx.obj["parallel"]) as pool:
        futures = {p.problem_id: pool.submit(run_one, p) for p in problems}
        for problem in problems:
            results[problem.problem_id] = futures[problem.problem_id].result()

    output_dir = config.path("output_dir")
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / "results.jsonl", "w", encoding="utf-8") as results_fh, \
         open(output_dir / "decisions.jsonl", "w", encoding="utf-8") as decisions_fh, \
         open(output_dir / "trajectories.jsonl", "w", encoding="utf-8") as trajectories_fh:
        results_fh.write(_header_line("solve-results", config.seed) + "\n")
        decisions_fh.write(_header_line("decision-log", config.seed) + "\n")
        trajectories_fh.write(_header_line("trajectory-log", config.seed) + "\n")
        for problem in problems:
            result = results[problem.problem_id]
            if isinstance(result, planner.RankingResult):
                record = {
                    "problem_id": result.problem_id,
                    "task": "retrieval_ranking",
                    "doc_ids": list(result.doc_ids),
                    "query_used": result.query_used,
                    "fallback": result.fallback,
                }
            else:
                record = {
                    "problem_id": result.problem_id,
                    "task": "answer_match",
                    "final_answer": result.final_answer,
                    "terminated_by": result.terminated_by.value,
                }
            results_fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
            decisions_fh.write(planner.format_decision_log(result))
            trajectories_fh.write(format_trajectory_log(result.trajectory))
    click.echo(f"solved: {len(results)}")
    click.echo(f"results written: {output_dir / 'results.jsonl'}")


@main.command("eval")
@click.option("--results", "results_path", type=click.Path(), default=None,
              help="Results file (defaults to paths.output_dir/results.jsonl).")
@click.option("--judgments", "judgments_path", type=click.Path(), default=None,
              help="Relevance judgments for ranking tasks (defaults to paths.judgments_file).")
@click.pass_context
def eval_cmd(ctx: click.Context, results_path: str | None, judgments_path: str | None):
    """Score solve results: accuracy for answer tasks, nDCG@10 for ranking tasks."""
    config: EngineConfig = ctx.obj["config"]
    _echo_config(config)
    results_file = Path(results_path) if results_path else config.path("output_dir") / "results.jsonl"
    if not results_file.exists():
        raise click.ClickException(
            f"results file not found: {results_file} (produce it with `criticplan solve`)"
        )
    problems = {p.problem_id: p for p in load_problems(config.path("problems_file"))}

    answer_rows: list[tuple[ProblemInstance, str]] = []
    ranking_rows: dict[str, list[str]] = {}
    with open(results_file, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            if line_number == 1 or not line.strip():
                continue
            record = json.loads(line)
            problem = problems.get(record["problem_id"])
            if problem is None:
                raise click.ClickException(
                    f"result for unknown problem {record['problem_id']!r}"
                )
            if record["task"] == "retrieval_ranking":
                ranking_rows[problem.problem_id] = list(record["doc_ids"])
            else:
                answer_rows.append((problem, record["final_answer"]))

    answer_report = None
    ranking_mean = None
    per_problem = None
    if answer_rows:
        answer_report = evaluation.accuracy(answer_rows, _checker_from_config(config))
        click.echo(f"accuracy: {answer_report.accuracy:.6f}")
    if ranking_rows:
        source = judgments_path or config.paths.get("judgments_file")
        if not source or not Path(source).exists():
            raise click.ClickException(
                f"judgments file not found: {source} (set paths.judgments_file)"
            )
        judgments = evaluation.load_judgments(source)
        ranking_mean, per_problem = evaluation.ranking_report(ranking_rows, judgments)
        click.echo(f"mean nDCG@10: {ranking_mean:.6f}")
    if not answer_rows and not ranking_rows:
        raise click.ClickException("results file contains no result records")

    report_path = config.path("output_dir") / "report.txt"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    body = evaluation.format_metric_report(answer_report, ranking_mean, per_problem)
    report_path.write_text(_header_line("metric-report", config.seed) + "\n" + body,
                           encoding="utf-8")
    click.echo(f"report written: {report_path}")


def run() -> None:
    try:
        main(standalone_mode=True)
    except CriticPlanError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run()
