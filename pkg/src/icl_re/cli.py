"""Command-line pipeline for relation-extraction experiments.

Subcommands mirror the artifact flow: ingest validates the corpus, embed and
index build the retrieval artifacts, epr-mine and epr-train fit the adapter,
predict runs the experiment, evaluate and compare work on finished runs.
Artifact-producing steps are idempotent and report whether they reused or
computed each output.

Exit codes: 0 success, 1 usage, 2 invalid data or state, 3 provider failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import vecio
from .config import ConfigError, ExperimentConfig, load_config
from .corpus import (
    Corpus,
    CorpusError,
    build_corpus,
    load_instances,
    load_schema_override,
)
from .epr import (
    CandidateScoringError,
    InsufficientCandidates,
    TrainingDiverged,
    TrainingPair,
    TrainSettings,
    label_pairs,
    load_adapter,
    mine_candidates,
    save_adapter,
    score_candidates,
    train_adapter,
)
from .knn import IndexBuildError, VectorIndex, load_index, save_index
from .metrics import EmptyTestSet, MetricsReport, SplitMismatch, compare_runs, compute_metrics
from .prompting import PromptError, embedding_text, render_instance
from .providers import (
    CompletionClient,
    EmbeddingClient,
    ProviderConfig,
    ProviderError,
    RetryPolicy,
    ScoringClient,
)
from .providers.http import HttpTransport
from .providers.mock import (
    EditDistanceScoringTransport,
    GoldLeakCompletionTransport,
    HashEmbeddingTransport,
    MajorityDemoCompletionTransport,
    ScriptedCompletionTransport,
)
from .runner import (
    DemoRetriever,
    FailureThresholdExceeded,
    PredictionRecord,
    RunnerError,
    build_test_prompt,
    resolve_test_vectors,
    run_experiment,
)
from .vecio import VectorFileError

logger = logging.getLogger("icl_re.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PROVIDER = 3

DATA_ERRORS = (
    ConfigError,
    CorpusError,
    VectorFileError,
    IndexBuildError,
    PromptError,
    EmptyTestSet,
    SplitMismatch,
    RunnerError,
    TrainingDiverged,
    InsufficientCandidates,
    FileNotFoundError,
)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, indent=2))


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "out", None):
        overrides.append(f"experiment.output_dir={args.out}")
    if getattr(args, "mock_providers", False):
        overrides.append("mock.enabled=true")
    return load_config(args.config, overrides=overrides)


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _artifact_paths(config: ExperimentConfig) -> dict[str, Path]:
    out = _out_dir(config)
    return {
        "embeddings_train": out / "embeddings_train.vec",
        "embeddings_test": out / "embeddings_test.vec",
        "index": out / "index.vec",
        "pairs": out / "epr_pairs.jsonl",
        "adapter": out / "adapter.bin",
        "runs": out / "runs",
    }


def _load_experiment_corpus(config: ExperimentConfig) -> Corpus:
    data = config.data
    if not data.train_path:
        raise ConfigError("data.train_path is not set")
    instances = load_instances(
        data.train_path,
        fmt=data.format,
        split="train",
        field_map=data.field_map or None,
        inclusive_ends=data.inclusive_ends,
    )
    if data.test_path:
        instances.extend(
            load_instances(
                data.test_path,
                fmt=data.format,
                split="test",
                field_map=data.field_map or None,
                inclusive_ends=data.inclusive_ends,
            )
        )
    override = load_schema_override(data.schema_path) if data.schema_path else None
    return build_corpus(instances, schema_override=override)


def _provider_config(
    config: ExperimentConfig, settings, model_name: str | None = None
) -> ProviderConfig:
    cache_dir = settings.cache_dir or str(_out_dir(config) / "cache")
    return ProviderConfig(
        base_url=settings.base_url,
        model_name=model_name or settings.model_name,
        api_key_env=settings.api_key_env,
        max_parallel=settings.max_parallel,
        cache_dir=cache_dir,
        retry=RetryPolicy(
            max_attempts=settings.retry.max_attempts,
            base_delay=settings.retry.base_delay,
        ),
        timeout=settings.timeout,
    )


def _http_transport(settings, which: str) -> HttpTransport:
    if not settings.base_url:
        raise ConfigError(
            f"providers.{which}.base_url is not set and mocks are disabled; "
            f"set the URL or pass --mock-providers"
        )
    return HttpTransport(
        settings.base_url,
        api_key_env=settings.api_key_env,
        timeout=settings.timeout,
    )


def _embedding_client(config: ExperimentConfig) -> EmbeddingClient:
    settings = config.providers.embedding
    model_name = None
    if config.mock.enabled:
        mock = config.mock
        transport = HashEmbeddingTransport(
            dim=mock.embedding_dim, seed=mock.embedding_seed
        )
        # the tag must identify the vector space, or a dim or seed change
        # would silently reuse stale artifacts and cache entries
        model_name = f"mock-hash-{mock.embedding_dim}d-{mock.embedding_seed}"
    else:
        transport = _http_transport(settings, "embedding")
    return EmbeddingClient(
        _provider_config(config, settings, model_name), transport
    )


def _completion_client(config: ExperimentConfig, corpus: Corpus) -> CompletionClient:
    settings = config.providers.completion
    model_name = None
    if config.mock.enabled:
        behavior = config.mock.completion_behavior
        model_name = f"mock-{behavior}"
        if behavior == "scripted":
            transport = ScriptedCompletionTransport(
                config.mock.responses, default=config.mock.completion_default
            )
        elif behavior == "gold_leak":
            answers = {
                render_instance(test, with_label=False): test.relation
                for test in corpus.split_instances("test")
            }
            transport = GoldLeakCompletionTransport(
                answers, default=config.mock.completion_default
            )
        else:
            transport = MajorityDemoCompletionTransport()
    else:
        transport = _http_transport(settings, "completion")
    return CompletionClient(
        _provider_config(config, settings, model_name), transport
    )


def _scoring_client(config: ExperimentConfig) -> ScoringClient:
    settings = config.providers.scoring
    model_name = None
    if config.mock.enabled:
        transport = EditDistanceScoringTransport()
        model_name = "mock-editdist"
    else:
        transport = _http_transport(settings, "scoring")
    return ScoringClient(_provider_config(config, settings, model_name), transport)


def _require_artifact(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise RunnerError(
            f"{path} does not exist; run the {produced_by} step first"
        )
    return path


def _load_test_vector_map(path: Path) -> dict[str, np.ndarray]:
    ids, matrix, _ = vecio.load_matrix(path)
    return {iid: matrix[row] for row, iid in enumerate(ids)}


def cmd_ingest(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _load_experiment_corpus(config)
    schema = {
        "|".join(pair): list(corpus.schema.permissible_relations(*pair))
        for pair in corpus.schema.type_pairs
    }
    _emit(
        {
            "train_instances": len(corpus.split_instances("train")),
            "test_instances": len(corpus.split_instances("test")),
            "type_pairs": len(corpus.schema.type_pairs),
            "relations": len(corpus.schema.all_relations),
            "schema": schema,
        }
    )
    return EXIT_OK


def _embed_split(config, corpus, client, split: str, path: Path) -> str:
    instances = corpus.split_instances(split)
    if not instances:
        return "empty"
    ids = [inst.id for inst in instances]
    if path.exists():
        stored_ids, _, stored_tag = vecio.load_matrix(path)
        if stored_ids == ids and stored_tag == client.config.model_name:
            return "reused"
        logger.info("%s is stale, recomputing", path)
    vectors = client.embed_batch([embedding_text(inst) for inst in instances])
    matrix = np.stack([np.asarray(vec.values, dtype=np.float64) for vec in vectors])
    vecio.save_matrix(path, ids, matrix, model_tag=client.config.model_name)
    return "computed"


def cmd_embed(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _load_experiment_corpus(config)
    paths = _artifact_paths(config)
    client = _embedding_client(config)
    statuses = {}
    for split, key in (("train", "embeddings_train"), ("test", "embeddings_test")):
        status = _embed_split(config, corpus, client, split, paths[key])
        statuses[key] = {"status": status, "path": str(paths[key])}
        logger.info("%s embeddings %s (%s)", split, status, paths[key])
    _emit(statuses)
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    paths = _artifact_paths(config)
    source = _require_artifact(paths["embeddings_train"], "embed")
    ids, matrix, model_tag = vecio.load_matrix(source)
    target = paths["index"]
    if target.exists():
        existing = load_index(target)
        if list(existing.ids) == ids and existing.model_tag == model_tag:
            _emit({"status": "reused", "path": str(target), "count": len(ids)})
            return EXIT_OK
        logger.info("%s is stale, rebuilding", target)
    index = VectorIndex(ids, matrix, model_tag=model_tag)
    save_index(index, target)
    _emit({"status": "computed", "path": str(target), "count": len(index)})
    return EXIT_OK


def cmd_epr_mine(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    paths = _artifact_paths(config)
    target = paths["pairs"]
    if target.exists():
        count = sum(1 for line in target.read_text(encoding="utf-8").splitlines() if line)
        _emit({"status": "reused", "path": str(target), "pairs": count})
        return EXIT_OK
    corpus = _load_experiment_corpus(config)
    index = load_index(_require_artifact(paths["index"], "index"))
    scorer = _scoring_client(config)
    epr = config.epr
    anchors = list(corpus.split_instances("train"))
    if epr.max_anchors > 0:
        anchors = anchors[: epr.max_anchors]
    pairs: list[TrainingPair] = []
    skipped = 0
    for anchor in anchors:
        try:
            candidate_ids = mine_candidates(corpus, index, anchor, epr.candidates)
        except InsufficientCandidates as exc:
            logger.debug("skipping anchor %s: %s", anchor.id, exc)
            skipped += 1
            continue
        if len(candidate_ids) < epr.positives + epr.negatives:
            logger.debug(
                "skipping anchor %s: only %d candidates",
                anchor.id,
                len(candidate_ids),
            )
            skipped += 1
            continue
        scored = score_candidates(
            scorer, corpus, anchor, candidate_ids, mode=config.experiment.scoring_mode
        )
        pairs.extend(label_pairs(scored, anchor.id, epr.positives, epr.negatives))
    with open(target, "w", encoding="utf-8") as sink:
        for pair in pairs:
            sink.write(
                json.dumps(
                    {
                        "anchor": pair.anchor_id,
                        "positive": pair.positive_id,
                        "negatives": list(pair.negative_ids),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    _emit(
        {
            "status": "computed",
            "path": str(target),
            "anchors": len(anchors),
            "skipped": skipped,
            "pairs": len(pairs),
        }
    )
    return EXIT_OK


def _load_pairs(path: Path) -> list[TrainingPair]:
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                pairs.append(
                    TrainingPair(
                        anchor_id=data["anchor"],
                        positive_id=data["positive"],
                        negative_ids=tuple(data["negatives"]),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise RunnerError(f"{path}:{lineno}: bad training pair: {exc}") from exc
    return pairs


def cmd_epr_train(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    paths = _artifact_paths(config)
    target = paths["adapter"]
    if target.exists():
        adapter = load_adapter(target)
        _emit({"status": "reused", "path": str(target), "dim": adapter.dim})
        return EXIT_OK
    pairs = _load_pairs(_require_artifact(paths["pairs"], "epr-mine"))
    if not pairs:
        raise RunnerError(f"{paths['pairs']} holds no training pairs")
    ids, matrix, _ = vecio.load_matrix(
        _require_artifact(paths["embeddings_train"], "embed")
    )
    table = {iid: matrix[row] for row, iid in enumerate(ids)}
    epr = config.epr
    settings = TrainSettings(
        epochs=epr.epochs,
        lr=epr.lr,
        batch_size=epr.batch_size,
        seed=config.experiment.seed,
        temperature=epr.temperature,
        in_batch_negatives=epr.in_batch_negatives,
    )
    adapter = train_adapter(pairs, table, settings)
    save_adapter(adapter, target)
    _emit(
        {
            "status": "computed",
            "path": str(target),
            "pairs": len(pairs),
            "epochs": epr.epochs,
            "final_loss": adapter.loss_curve[-1] if adapter.loss_curve else None,
        }
    )
    return EXIT_OK


def _retrieval_artifacts(config: ExperimentConfig):
    """Load whatever the configured retriever needs from disk."""
    exp = config.experiment
    k = exp.k_retrieved if exp.retriever != "none" else 0
    if k < 1:
        return None, None, None
    paths = _artifact_paths(config)
    index = load_index(_require_artifact(paths["index"], "index"))
    test_vectors = _load_test_vector_map(
        _require_artifact(paths["embeddings_test"], "embed")
    )
    adapter = None
    if exp.retriever == "epr":
        adapter = load_adapter(_require_artifact(paths["adapter"], "epr-train"))
    return index, test_vectors, adapter


def cmd_predict(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _load_experiment_corpus(config)
    index, test_vectors, adapter = _retrieval_artifacts(config)
    exp = config.experiment
    k = exp.k_retrieved if exp.retriever != "none" else 0

    if args.dry_run:
        tests = corpus.split_instances("test")
        if not tests:
            raise RunnerError("the corpus has no test instances")
        first = tests[0]
        retrieved: list[str] = []
        if k > 0:
            retriever = DemoRetriever(
                corpus,
                index,
                adapter=adapter,
                restrict_to_type_pair=exp.restrict_to_type_pair,
            )
            vectors = resolve_test_vectors([first], test_vectors=test_vectors)
            retrieved = retriever.retrieve([first], vectors, k)[first.id]
        bundle = build_test_prompt(first, retrieved, corpus, config)
        print(bundle.text)
        return EXIT_OK

    completion = _completion_client(config, corpus)
    run_dir = _artifact_paths(config)["runs"] / config.digest()
    records, report = run_experiment(
        corpus,
        config,
        completion,
        run_dir,
        index=index,
        adapter=adapter,
        test_vectors=test_vectors,
    )
    _emit(
        {
            "run_dir": str(run_dir),
            "records": len(records),
            "micro_f1_excl_norel": report.micro_f1_excl_norel,
            "micro_f1_incl_norel": report.micro_f1_incl_norel,
            "macro_f1": report.macro_f1,
            "fallback_rate": report.fallback_rate,
        }
    )
    return EXIT_OK


def _read_records_file(path: Path) -> list[PredictionRecord]:
    records = []
    raw = path.read_text(encoding="utf-8")
    lines = raw.split("\n")
    for position, line in enumerate(lines):
        if not line:
            continue
        if position == len(lines) - 1:
            logger.warning("ignoring partial trailing line in %s", path)
            break
        try:
            records.append(PredictionRecord.from_json_dict(json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise RunnerError(f"{path} line {position + 1} is corrupt: {exc}") from exc
    return records


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = _load_experiment_corpus(config)
    run_dir = Path(args.run) if args.run else _artifact_paths(config)["runs"] / config.digest()
    records = _read_records_file(_require_artifact(run_dir / "records.jsonl", "predict"))
    expected = len(corpus.split_instances("test"))
    if len(records) != expected:
        logger.warning(
            "run holds %d records but the test split has %d instances",
            len(records),
            expected,
        )
    report = compute_metrics(
        records,
        schema=corpus.schema,
        config={"digest": config.digest(), "config": config.to_dict()},
    )
    (run_dir / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    _emit(report.to_dict())
    return EXIT_OK


def _load_report(path_text: str) -> MetricsReport:
    path = Path(path_text)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise RunnerError(f"{path} does not exist; run predict or evaluate first")
    return MetricsReport.from_dict(json.loads(path.read_text(encoding="utf-8")))


def cmd_compare(args: argparse.Namespace) -> int:
    baseline = _load_report(args.baseline)
    other = _load_report(args.other)
    _emit(compare_runs(baseline, other))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", "-c", help="TOML experiment config")
    shared.add_argument(
        "--set",
        "-s",
        action="append",
        metavar="KEY=VALUE",
        help="config override with a dotted key path, repeatable",
    )
    shared.add_argument("--out", help="override experiment.output_dir")
    shared.add_argument(
        "--mock-providers",
        action="store_true",
        help="use deterministic in-process providers",
    )
    shared.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="log progress to stderr, twice for debug detail",
    )

    parser = argparse.ArgumentParser(
        prog="icl-re",
        description="In-context relation extraction experiment pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser(
        "ingest", parents=[shared], help="load and validate the corpus"
    ).set_defaults(func=cmd_ingest)
    sub.add_parser(
        "embed", parents=[shared], help="embed train and test texts"
    ).set_defaults(func=cmd_embed)
    sub.add_parser(
        "index", parents=[shared], help="build the retrieval index"
    ).set_defaults(func=cmd_index)
    sub.add_parser(
        "epr-mine", parents=[shared], help="mine and score adapter training pairs"
    ).set_defaults(func=cmd_epr_mine)
    sub.add_parser(
        "epr-train", parents=[shared], help="train the retrieval adapter"
    ).set_defaults(func=cmd_epr_train)
    predict = sub.add_parser(
        "predict", parents=[shared], help="run predictions over the test split"
    )
    predict.add_argument(
        "--dry-run",
        action="store_true",
        help="print the first prompt instead of calling the completion provider",
    )
    predict.set_defaults(func=cmd_predict)
    evaluate = sub.add_parser(
        "evaluate", parents=[shared], help="recompute metrics for a finished run"
    )
    evaluate.add_argument("--run", help="run directory, default from the config digest")
    evaluate.set_defaults(func=cmd_evaluate)
    compare = sub.add_parser(
        "compare", parents=[shared], help="diff two run reports"
    )
    compare.add_argument("baseline", help="run directory or report.json")
    compare.add_argument("other", help="run directory or report.json")
    compare.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except FailureThresholdExceeded as exc:
        logger.error("%s", exc)
        return EXIT_PROVIDER
    except CandidateScoringError as exc:
        logger.error("%s", exc)
        return EXIT_PROVIDER
    except ProviderError as exc:
        logger.error("%s", exc)
        return EXIT_PROVIDER
    except DATA_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_DATA


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
