"""End-to-end prediction loop: retrieve demonstrations, build prompts,
call the completion provider, and score the results.

Run state lives under a directory keyed by the config digest. records.jsonl
is append-only with one flushed line per prediction, so an interrupted run
resumes where it stopped; records whose parse_status is "error" are retried
on resume. Serialized records carry no timing or other machine-local data,
which keeps repeated mock runs byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .corpus import NO_RELATION, Corpus, REInstance
from .epr import AdapterModel, ProjectedIndex
from .knn import VectorIndex
from .metrics import MetricsReport, compute_metrics
from .prompting import (
    DEFAULT_TASK_DESCRIPTION,
    PromptBundle,
    PromptTemplate,
    build_prompt,
    embedding_text,
    parse_relation,
)
from .providers import CompletionClient, EmbeddingClient, ProviderError

logger = logging.getLogger(__name__)

PARSE_STATUSES = ("exact", "normalized", "fallback", "error")


class RunnerError(RuntimeError):
    """Experiment plumbing failure (stale artifacts, corrupt run state)."""


class FailureThresholdExceeded(RunnerError):
    """Too many per-instance provider failures to trust the run."""

    def __init__(self, failed: int, total: int, fraction: float):
        self.failed = failed
        self.total = total
        self.fraction = fraction
        super().__init__(
            f"{failed} of {total} instances failed, exceeding the configured "
            f"abort fraction {fraction}"
        )


_RECORD_FIELDS = (
    "test_id",
    "gold",
    "predicted",
    "parse_status",
    "prompt_digest",
    "demo_ids",
    "raw_completion",
    "template_version",
)


@dataclass
class PredictionRecord:
    """One prediction. latency_s is in-memory only and never serialized,
    so records from identical runs compare byte for byte."""

    test_id: str
    gold: str
    predicted: str
    parse_status: str
    prompt_digest: str
    demo_ids: tuple[str, ...]
    raw_completion: str
    template_version: str
    latency_s: float = field(default=0.0, compare=False)

    def to_json_dict(self) -> dict:
        data = {name: getattr(self, name) for name in _RECORD_FIELDS}
        data["demo_ids"] = list(self.demo_ids)
        return data

    @classmethod
    def from_json_dict(cls, data: dict) -> "PredictionRecord":
        if not isinstance(data, dict):
            raise ValueError(f"record must be an object, got {type(data).__name__}")
        missing = [name for name in _RECORD_FIELDS if name not in data]
        if missing:
            raise ValueError(f"record is missing fields {missing}")
        unknown = sorted(set(data) - set(_RECORD_FIELDS))
        if unknown:
            raise ValueError(f"record has unknown fields {unknown}")
        kwargs = {name: data[name] for name in _RECORD_FIELDS}
        kwargs["demo_ids"] = tuple(kwargs["demo_ids"])
        return cls(**kwargs)


def record_line(record: PredictionRecord) -> str:
    return json.dumps(record.to_json_dict(), sort_keys=True, separators=(",", ":"))


def prompt_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


class DemoRetriever:
    """Resolves retrieved demonstration ids for test instances.

    With restrict_to_type_pair the candidate pool is the train instances
    sharing the test pair's entity types, realized as a per-pair sub-index
    so ranking goes through the exact same scan as the full index. Without
    it the full index is queried and neighbours whose labels are not
    permissible for the test pair are dropped, which can leave fewer than
    k demonstrations.
    """

    def __init__(
        self,
        corpus: Corpus,
        index: VectorIndex,
        adapter: AdapterModel | None = None,
        restrict_to_type_pair: bool = True,
    ):
        self.corpus = corpus
        self.index = index
        self.adapter = adapter
        self.restrict = restrict_to_type_pair
        self._searchers: dict = {}

    def _wrap(self, index: VectorIndex):
        if self.adapter is None:
            return index
        return ProjectedIndex(self.adapter, index)

    def _searcher_for(self, pair: tuple[str, str]):
        key = pair if self.restrict else None
        if key in self._searchers:
            return self._searchers[key]
        if not self.restrict:
            searcher = self._wrap(self.index)
        else:
            pool = [
                iid
                for iid in self.corpus.by_type_pair.get(pair, ())
                if self.corpus.get(iid).split == "train"
            ]
            missing = [iid for iid in pool if iid not in self.index]
            if missing:
                raise RunnerError(
                    f"train instances {missing[:5]} have no vector in the index; "
                    f"re-run the embed and index steps"
                )
            if not pool:
                searcher = None
            else:
                rows = np.stack([self.index.get_vector(iid) for iid in pool])
                searcher = self._wrap(
                    VectorIndex(pool, rows, model_tag=self.index.model_tag)
                )
        self._searchers[key] = searcher
        return searcher

    def retrieve(
        self,
        tests: Sequence[REInstance],
        vectors: Sequence,
        k: int,
    ) -> dict[str, list[str]]:
        """Map each test id to its retrieved train ids, most similar first.

        `vectors` holds one query vector per test instance, in order; see
        resolve_test_vectors.
        """
        if k < 1:
            return {test.id: [] for test in tests}
        if len(vectors) != len(tests):
            raise RunnerError(
                f"{len(vectors)} query vectors for {len(tests)} test instances"
            )
        out: dict[str, list[str]] = {}
        for test, vector in zip(tests, vectors):
            searcher = self._searcher_for(test.type_pair)
            if searcher is None:
                logger.warning(
                    "no train candidates for type pair %s, test %s gets no "
                    "retrieved demonstrations",
                    test.type_pair,
                    test.id,
                )
                out[test.id] = []
                continue
            neighbors = searcher.query(vector, k=k)
            ids = [n.id for n in neighbors]
            if not self.restrict:
                permissible = set(
                    self.corpus.schema.permissible_relations(*test.type_pair)
                )
                kept = []
                for iid in ids:
                    demo = self.corpus.get(iid)
                    if demo.split != "train":
                        raise RunnerError(
                            f"index returned non-train instance {iid!r}; the "
                            f"index artifact does not match the corpus"
                        )
                    if demo.relation in permissible:
                        kept.append(iid)
                if len(kept) < len(ids):
                    logger.debug(
                        "dropped %d retrieved demos with labels outside the "
                        "pair schema for test %s",
                        len(ids) - len(kept),
                        test.id,
                    )
                ids = kept
            out[test.id] = ids
        return out


def resolve_test_vectors(
    tests: Sequence[REInstance],
    embedding_client: EmbeddingClient | None = None,
    test_vectors=None,
) -> list[np.ndarray]:
    """One query vector per test instance, in order.

    Stored vectors (a mapping of test id to vector) win over the embedding
    client; with only a client, all test texts go out as a single batch.
    """
    if test_vectors is not None:
        missing = [test.id for test in tests if test.id not in test_vectors]
        if missing:
            raise RunnerError(
                f"no stored embedding for test ids {missing[:5]}; re-run the "
                f"embed step"
            )
        return [
            np.asarray(
                getattr(test_vectors[test.id], "values", test_vectors[test.id]),
                dtype=np.float64,
            )
            for test in tests
        ]
    if embedding_client is None:
        raise RunnerError(
            "retrieval needs stored test embeddings or an embedding client"
        )
    embedded = embedding_client.embed_batch([embedding_text(t) for t in tests])
    return [np.asarray(vec.values, dtype=np.float64) for vec in embedded]


def _load_template(config: ExperimentConfig) -> PromptTemplate:
    if config.prompt.template_path:
        return PromptTemplate.from_file(config.prompt.template_path)
    return PromptTemplate.default()


def build_test_prompt(
    test: REInstance,
    retrieved_ids: Sequence[str],
    corpus: Corpus,
    config: ExperimentConfig,
    template: PromptTemplate | None = None,
) -> PromptBundle:
    """Assemble the prompt for one test instance from retrieval output."""
    if template is None:
        template = _load_template(config)
    retrieved = [corpus.get(iid) for iid in retrieved_ids]
    return build_prompt(
        test,
        retrieved,
        corpus,
        r_per_class=config.experiment.r_per_class,
        seed=config.experiment.seed,
        template=template,
        task_description=config.prompt.task_description or DEFAULT_TASK_DESCRIPTION,
        order=config.prompt.order,
        token_budget=config.prompt.token_budget,
    )


def _read_resumable_records(path: Path) -> list[PredictionRecord]:
    """Parse records.jsonl, truncating a partial trailing line in place.

    Only complete newline-terminated lines count. A malformed line anywhere
    but the end means the file was edited or corrupted, which is an error.
    """
    raw = path.read_bytes()
    records: list[PredictionRecord] = []
    good_bytes = 0
    lines = raw.split(b"\n")
    for position, line in enumerate(lines):
        final = position == len(lines) - 1
        if final:
            if line:
                logger.warning(
                    "truncating partial trailing line in %s (%d bytes)",
                    path,
                    len(line),
                )
                with open(path, "r+b") as handle:
                    handle.truncate(good_bytes)
            break
        try:
            records.append(PredictionRecord.from_json_dict(json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise RunnerError(
                f"{path} line {position + 1} is corrupt ({exc}); delete the "
                f"run directory to start over"
            ) from exc
        good_bytes += len(line) + 1
    return records


def _prepare_run_dir(run_dir: Path, config: ExperimentConfig) -> list[PredictionRecord]:
    """Create or re-open a run directory, returning finished records.

    Error records from a previous attempt are dropped from the file so the
    instances they cover get retried.
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    config_path = run_dir / "config.json"
    if config_path.exists():
        stored = json.loads(config_path.read_text(encoding="utf-8"))
        if stored.get("digest") != digest:
            raise RunnerError(
                f"run directory {run_dir} holds a run with config digest "
                f"{stored.get('digest')!r}, current config is {digest!r}"
            )
    else:
        config_path.write_text(
            json.dumps(
                {"digest": digest, "config": config.to_dict()},
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )

    records_path = run_dir / "records.jsonl"
    if not records_path.exists():
        return []
    records = _read_resumable_records(records_path)
    keep = [r for r in records if r.parse_status != "error"]
    if len(keep) < len(records):
        logger.info(
            "retrying %d previously failed instances", len(records) - len(keep)
        )
        tmp = records_path.with_suffix(f".tmp.{os.getpid()}")
        with open(tmp, "w", encoding="utf-8") as handle:
            for record in keep:
                handle.write(record_line(record) + "\n")
        os.replace(tmp, records_path)
    if keep:
        logger.info("resuming run %s with %d finished records", digest, len(keep))
    return keep


def run_experiment(
    corpus: Corpus,
    config: ExperimentConfig,
    completion_client: CompletionClient,
    run_dir: str | Path,
    index: VectorIndex | None = None,
    adapter: AdapterModel | None = None,
    embedding_client: EmbeddingClient | None = None,
    test_vectors=None,
) -> tuple[list[PredictionRecord], MetricsReport]:
    """Predict every test instance and score the run.

    Completions run on a thread pool sized by the completion provider's
    max_parallel; results are written in submission order, one flushed
    JSON line each, so the run can resume after an interruption. A
    per-instance provider failure yields a no_relation prediction with
    parse_status "error"; once failures exceed
    experiment.failure_abort_fraction of the test set the run aborts.
    """
    run_dir = Path(run_dir)
    tests = list(corpus.split_instances("test"))
    if not tests:
        raise RunnerError("the corpus has no test instances")

    exp = config.experiment
    k = exp.k_retrieved if exp.retriever != "none" else 0
    if k > 0:
        if index is None:
            raise RunnerError(
                f"retriever {exp.retriever!r} needs a vector index; run the "
                f"embed and index steps first"
            )
        if embedding_client is None and test_vectors is None:
            raise RunnerError(
                "retrieval needs stored test embeddings or an embedding client"
            )
        if exp.retriever == "epr" and adapter is None:
            raise RunnerError(
                "retriever 'epr' needs a trained adapter; run the epr steps first"
            )

    done = _prepare_run_dir(run_dir, config)
    known_ids = {test.id for test in tests}
    for record in done:
        if record.test_id not in known_ids:
            raise RunnerError(
                f"resumed record {record.test_id!r} is not in the current test "
                f"split; delete {run_dir} to start over"
            )
    done_ids = {record.test_id for record in done}
    todo = [test for test in tests if test.id not in done_ids]
    logger.info(
        "run %s: %d test instances, %d already done, retriever=%s k=%d r=%d",
        config.digest(),
        len(tests),
        len(done),
        exp.retriever,
        k,
        exp.r_per_class,
    )

    retrieved_ids: dict[str, list[str]] = {test.id: [] for test in todo}
    if k > 0 and todo:
        retriever = DemoRetriever(
            corpus,
            index,
            adapter=adapter if exp.retriever == "epr" else None,
            restrict_to_type_pair=exp.restrict_to_type_pair,
        )
        vectors = resolve_test_vectors(
            todo, embedding_client=embedding_client, test_vectors=test_vectors
        )
        retrieved_ids = retriever.retrieve(todo, vectors, k)

    template = _load_template(config)
    max_tokens = config.providers.completion.max_tokens
    prompts_dir = run_dir / "prompts"
    if config.prompt.dump_prompts:
        prompts_dir.mkdir(exist_ok=True)

    def predict_one(test: REInstance) -> tuple[PredictionRecord, str]:
        bundle = build_test_prompt(
            test, retrieved_ids[test.id], corpus, config, template
        )
        started = time.perf_counter()
        try:
            completion = completion_client.complete(
                bundle.text, max_tokens=max_tokens, temperature=0.0
            )
        except ProviderError as exc:
            elapsed = time.perf_counter() - started
            logger.warning("completion failed for %s: %s", test.id, exc)
            record = PredictionRecord(
                test_id=test.id,
                gold=test.relation,
                predicted=NO_RELATION,
                parse_status="error",
                prompt_digest=prompt_digest(bundle.text),
                demo_ids=bundle.demo_ids,
                raw_completion="",
                template_version=bundle.template_version,
                latency_s=elapsed,
            )
            return record, bundle.text
        elapsed = time.perf_counter() - started
        predicted, status = parse_relation(completion, bundle.permissible)
        record = PredictionRecord(
            test_id=test.id,
            gold=test.relation,
            predicted=predicted,
            parse_status=status,
            prompt_digest=prompt_digest(bundle.text),
            demo_ids=bundle.demo_ids,
            raw_completion=completion,
            template_version=bundle.template_version,
            latency_s=elapsed,
        )
        return record, bundle.text

    records_path = run_dir / "records.jsonl"
    new_records: list[PredictionRecord] = []
    failures = 0
    allowed = exp.failure_abort_fraction * len(tests)
    workers = max(1, config.providers.completion.max_parallel)
    with open(records_path, "a", encoding="utf-8") as sink:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(predict_one, test) for test in todo]
            try:
                for test, future in zip(todo, futures):
                    record, text = future.result()
                    sink.write(record_line(record) + "\n")
                    sink.flush()
                    if config.prompt.dump_prompts:
                        (prompts_dir / f"{test.id}.txt").write_text(
                            text, encoding="utf-8"
                        )
                    new_records.append(record)
                    if record.parse_status == "error":
                        failures += 1
                        if failures > allowed:
                            raise FailureThresholdExceeded(
                                failures, len(tests), exp.failure_abort_fraction
                            )
            except FailureThresholdExceeded:
                for future in futures:
                    future.cancel()
                raise

    by_id = {record.test_id: record for record in done + new_records}
    records = [by_id[test.id] for test in tests]
    report = compute_metrics(
        records,
        schema=corpus.schema,
        config={"digest": config.digest(), "config": config.to_dict()},
    )
    report_path = run_dir / "report.json"
    report_path.write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    logger.info(
        "run %s finished: micro-F1 (excl. %s) %.4f over %d records",
        config.digest(),
        NO_RELATION,
        report.micro_f1_excl_norel,
        report.n_records,
    )
    return records, report
