from __future__ import annotations

import json
import threading
import time

import pytest

from icl_re.providers.base import (
    CapabilityUnsupported,
    DimensionMismatch,
    ProviderConfig,
    ProviderRefusal,
    RetryPolicy,
    ScoreResult,
    TransportError,
)
from icl_re.providers.cache import ResponseCache, cache_key
from icl_re.providers.clients import (
    CompletionClient,
    EmbeddingClient,
    ScoringClient,
    UnsupportedCapabilityTransport,
)
from icl_re.providers.mock import (
    EditDistanceScoringTransport,
    GoldLeakCompletionTransport,
    HashEmbeddingTransport,
    MajorityDemoCompletionTransport,
    ScriptedCompletionTransport,
    StaticScoringTransport,
)


def _config(tmp_path=None, **kwargs) -> ProviderConfig:
    defaults = dict(model_name="mock-model", max_parallel=4)
    if tmp_path is not None:
        defaults["cache_dir"] = str(tmp_path / "cache")
    defaults.update(kwargs)
    return ProviderConfig(**defaults)


class TestEmbeddings:
    def test_vectors_are_unit_norm(self):
        client = EmbeddingClient(_config(), HashEmbeddingTransport(dim=64))
        (vec,) = client.embed_batch(["Acme bought Beta"])
        norm = sum(v * v for v in vec.values) ** 0.5
        assert abs(norm - 1.0) < 1e-9
        assert vec.dim == 64
        assert vec.model_tag == "mock-model"

    def test_duplicate_texts_in_one_batch_hit_backend_once(self, tmp_path):
        transport = HashEmbeddingTransport(dim=16)
        client = EmbeddingClient(_config(tmp_path), transport)
        a, b = client.embed_batch(["same text", "same text"])
        assert a.values == b.values
        assert transport.calls == 1

    def test_repeat_across_batches_served_from_cache(self, tmp_path):
        transport = HashEmbeddingTransport(dim=16)
        client = EmbeddingClient(_config(tmp_path), transport)
        (first,) = client.embed_batch(["hello world"])
        (second,) = client.embed_batch(["hello world"])
        assert first.values == second.values
        assert transport.calls == 1

    def test_distinct_texts_get_distinct_vectors(self):
        client = EmbeddingClient(_config(), HashEmbeddingTransport(dim=256))
        vecs = client.embed_batch(["alpha", "beta", "gamma"])
        seen = {v.values for v in vecs}
        assert len(seen) == 3

    def test_thousand_distinct_texts_no_collisions(self):
        transport = HashEmbeddingTransport(dim=256)
        texts = [f"instance number {i} with marker tokens" for i in range(1000)]
        vectors = {tuple(transport.send({"input": [t]})["data"][0]["embedding"]) for t in texts}
        assert len(vectors) == 1000

    def test_results_align_with_input_order(self):
        client = EmbeddingClient(_config(max_parallel=8), HashEmbeddingTransport(dim=32))
        texts = [f"text {i}" for i in range(20)]
        vecs = client.embed_batch(texts)
        again = client.embed_batch(list(reversed(texts)))
        assert [v.values for v in again] == [v.values for v in reversed(vecs)]

    def test_empty_inputs_rejected(self):
        client = EmbeddingClient(_config(), HashEmbeddingTransport())
        with pytest.raises(ValueError):
            client.embed_batch([])
        with pytest.raises(ValueError, match="position 1"):
            client.embed_batch(["fine", "   "])

    def test_dimension_drift_detected(self):
        class DriftingTransport:
            def __init__(self):
                self.n = 0

            def send(self, body):
                self.n += 1
                dim = 4 if self.n == 1 else 5
                return {"data": [{"embedding": [1.0] * dim}]}

        client = EmbeddingClient(_config(max_parallel=1), DriftingTransport())
        client.embed_batch(["first"])
        with pytest.raises(DimensionMismatch, match="dim 5"):
            client.embed_batch(["second"])

    def test_malformed_response_rejected(self):
        class BadTransport:
            def send(self, body):
                return {"data": []}

        client = EmbeddingClient(_config(), BadTransport())
        with pytest.raises(TransportError, match="malformed"):
            client.embed_batch(["text"])

    def test_parallelism_never_exceeds_limit(self):
        limit = 3

        class InstrumentedTransport(HashEmbeddingTransport):
            def __init__(self):
                super().__init__(dim=8)
                self.in_flight = 0
                self.max_in_flight = 0
                self.gauge = threading.Lock()

            def send(self, body):
                with self.gauge:
                    self.in_flight += 1
                    self.max_in_flight = max(self.max_in_flight, self.in_flight)
                time.sleep(0.002)
                try:
                    return super().send(body)
                finally:
                    with self.gauge:
                        self.in_flight -= 1

        transport = InstrumentedTransport()
        client = EmbeddingClient(_config(max_parallel=limit), transport)
        client.embed_batch([f"burst {i}" for i in range(100)])
        assert transport.calls == 100
        assert 1 <= transport.max_in_flight <= limit


class TestCompletions:
    def test_scripted_response_and_default(self):
        transport = ScriptedCompletionTransport({"ping": "pong"}, default="dunno")
        client = CompletionClient(_config(), transport)
        assert client.complete("ping") == "pong"
        assert client.complete("other") == "dunno"

    def test_temperature_zero_is_cached(self, tmp_path):
        transport = ScriptedCompletionTransport(default="out")
        client = CompletionClient(_config(tmp_path), transport)
        assert client.complete("prompt", temperature=0.0) == "out"
        assert client.complete("prompt", temperature=0.0) == "out"
        assert transport.calls == 1

    def test_nonzero_temperature_bypasses_cache(self, tmp_path):
        transport = ScriptedCompletionTransport(default="out")
        client = CompletionClient(_config(tmp_path), transport)
        client.complete("prompt", temperature=0.7)
        client.complete("prompt", temperature=0.7)
        assert transport.calls == 2

    def test_refusal_is_distinct_from_empty_text(self):
        class RefusingTransport:
            def send(self, body):
                return {"refusal": "cannot answer"}

        client = CompletionClient(_config(), RefusingTransport())
        with pytest.raises(ProviderRefusal, match="cannot answer"):
            client.complete("prompt")

        empty = CompletionClient(_config(), ScriptedCompletionTransport(default=""))
        assert empty.complete("prompt") == ""

    def test_argument_validation(self):
        client = CompletionClient(_config(), ScriptedCompletionTransport())
        with pytest.raises(ValueError):
            client.complete("")
        with pytest.raises(ValueError):
            client.complete("p", temperature=-0.1)
        with pytest.raises(ValueError):
            client.complete("p", max_tokens=0)


class TestGoldLeakMock:
    def test_answers_for_the_final_test_block(self):
        answers = {
            "[E1]Acme[/E1] hired [E2]Dan[/E2]": "employee_of",
            "[E1]Acme[/E1] hired": "founder_of",
        }
        transport = GoldLeakCompletionTransport(answers)
        prompt = "demos...\n\n[E1]Acme[/E1] hired [E2]Dan[/E2]\nRelation:"
        assert transport.send({"prompt": prompt})["text"] == "employee_of"

    def test_default_when_no_key_matches(self):
        transport = GoldLeakCompletionTransport({"known input": "rel"}, default="no relation")
        assert transport.send({"prompt": "something else\nRelation:"})["text"] == "no relation"


class TestMajorityMock:
    PROMPT = (
        "Classify the relation.\n"
        "Possible relations: employee_of, founder_of, no_relation\n\n"
        "input one\nRelation: founder_of\n\n"
        "input two\nRelation: employee_of\n\n"
        "input three\nRelation: founder_of\n\n"
        "test input\nRelation:"
    )

    def test_most_frequent_demo_label_wins(self):
        transport = MajorityDemoCompletionTransport()
        assert transport.send({"prompt": self.PROMPT})["text"] == "founder_of"

    def test_tie_broken_by_class_listing_order(self):
        prompt = self.PROMPT.replace("input three\nRelation: founder_of\n\n", "")
        transport = MajorityDemoCompletionTransport()
        assert transport.send({"prompt": prompt})["text"] == "employee_of"

    def test_no_demos_falls_back_to_first_class(self):
        prompt = (
            "Possible relations: employee_of, founder_of, no_relation\n\n"
            "test input\nRelation:"
        )
        transport = MajorityDemoCompletionTransport()
        assert transport.send({"prompt": prompt})["text"] == "employee_of"


class TestScoring:
    PREFIX = (
        "[E1]Acme[/E1] was founded by [E2]Alice[/E2]\nRelation: founder_of\n"
        "[E1]Bolt[/E1] was started by [E2]Bob[/E2]\nRelation:"
    )

    def test_edit_distance_mock_identical_label(self):
        client = ScoringClient(_config(), EditDistanceScoringTransport())
        result = client.score_output(self.PREFIX, "founder_of")
        assert result.total_logprob == 0.0
        assert result.from_mock

    def test_edit_distance_mock_distant_label(self):
        client = ScoringClient(_config(), EditDistanceScoringTransport())
        result = client.score_output(self.PREFIX, "no_relation")
        assert result.total_logprob == -9.0

    def test_per_token_normalization(self):
        client = ScoringClient(_config(), StaticScoringTransport([-0.5] * 4))
        result = client.score_output("prefix", "target")
        assert result.total_logprob == -2.0
        assert result.token_count == 4
        assert result.per_token() == -0.5

    def test_positive_total_rejected_for_real_providers(self):
        class BrokenTransport:
            def send(self, body):
                return {"logprobs": [0.5, 0.25]}

        client = ScoringClient(_config(), BrokenTransport())
        with pytest.raises(TransportError, match="positive"):
            client.score_output("prefix", "target")

    def test_mock_may_return_positive_total(self):
        class OptimisticMock:
            def send(self, body):
                return {"logprobs": [0.5], "mock": True}

        client = ScoringClient(_config(), OptimisticMock())
        assert client.score_output("p", "t").total_logprob == 0.5

    def test_score_result_validation(self):
        with pytest.raises(ValueError):
            ScoreResult(total_logprob=-1.0, token_count=0)

    def test_unsupported_capability(self):
        client = ScoringClient(_config(), UnsupportedCapabilityTransport("scores"))
        with pytest.raises(CapabilityUnsupported, match="scores"):
            client.score_output("prefix", "target")


class TestRetry:
    class FlakyTransport:
        def __init__(self, failures: int, retryable: bool = True):
            self.failures = failures
            self.retryable = retryable
            self.calls = 0

        def send(self, body):
            self.calls += 1
            if self.calls <= self.failures:
                raise TransportError("boom", retryable=self.retryable)
            return {"text": "recovered"}

    def test_backoff_delays_double(self):
        delays: list[float] = []
        transport = self.FlakyTransport(failures=2)
        client = CompletionClient(
            _config(retry=RetryPolicy(max_attempts=3, base_delay=0.1)),
            transport,
            sleep=delays.append,
        )
        assert client.complete("p") == "recovered"
        assert delays == pytest.approx([0.1, 0.2])
        assert transport.calls == 3

    def test_exhausted_retries_name_capability_and_attempts(self):
        delays: list[float] = []
        transport = self.FlakyTransport(failures=99)
        client = CompletionClient(
            _config(retry=RetryPolicy(max_attempts=3, base_delay=0.01)),
            transport,
            sleep=delays.append,
        )
        with pytest.raises(TransportError, match="completions.*3 attempts"):
            client.complete("p")
        assert transport.calls == 3
        assert len(delays) == 2

    def test_non_retryable_fails_immediately(self):
        delays: list[float] = []
        transport = self.FlakyTransport(failures=99, retryable=False)
        client = CompletionClient(_config(), transport, sleep=delays.append)
        with pytest.raises(TransportError):
            client.complete("p")
        assert transport.calls == 1
        assert delays == []


class TestCache:
    def test_key_depends_on_capability_model_and_body(self):
        body = {"model": "m", "input": ["x"]}
        base = cache_key("embeddings", "m", body)
        assert cache_key("completions", "m", body) != base
        assert cache_key("embeddings", "other", body) != base
        assert cache_key("embeddings", "m", {"model": "m", "input": ["y"]}) != base

    def test_key_ignores_dict_insertion_order(self):
        a = {"model": "m", "input": ["x"]}
        b = {"input": ["x"], "model": "m"}
        assert cache_key("embeddings", "m", a) == cache_key("embeddings", "m", b)

    def test_disk_layout_and_entry_contents(self, tmp_path):
        cache = ResponseCache(tmp_path)
        body = {"model": "m", "prompt": "p"}
        key = cache_key("completions", "m", body)
        cache.put("completions", key, body, {"text": "out"})
        path = tmp_path / "completions" / key[:2] / f"{key}.json"
        assert path.exists()
        entry = json.loads(path.read_text())
        assert entry["request"] == body
        assert entry["response"] == {"text": "out"}
        assert "created_at" in entry
        assert cache.get("completions", key) == {"text": "out"}

    def test_disabled_cache_is_inert(self):
        cache = ResponseCache(None)
        cache.put("completions", "ab" * 32, {}, {"text": "x"})
        assert cache.get("completions", "ab" * 32) is None
