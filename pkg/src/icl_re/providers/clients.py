"""Provider clients: caching, retry, and bounded parallelism over a transport.

A client owns one capability (embeddings, completions, or scores). Every
request is checked against the response cache first; misses go to the
transport under a semaphore so at most max_parallel requests are in flight,
with exponential backoff on retryable failures.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

from icl_re.providers.base import (
    CapabilityUnsupported,
    DimensionMismatch,
    EmbeddingVector,
    ProviderConfig,
    ProviderRefusal,
    ScoreResult,
    Transport,
    TransportError,
)
from icl_re.providers.cache import ResponseCache, cache_key


class UnsupportedCapabilityTransport:
    """Placeholder transport for capabilities with no configured provider."""

    def __init__(self, capability: str):
        self.capability = capability

    def send(self, body: dict) -> dict:
        raise CapabilityUnsupported(
            f"no {self.capability} provider is configured"
        )


class _ProviderClient:
    capability: str = ""

    def __init__(
        self,
        config: ProviderConfig,
        transport: Transport,
        cache: ResponseCache | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.transport = transport
        self.cache = cache if cache is not None else ResponseCache(config.cache_dir or None)
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(max(1, config.max_parallel))

    def _send_with_retry(self, body: dict) -> dict:
        policy = self.config.retry
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._semaphore:
                    return self.transport.send(body)
            except TransportError as exc:
                if not exc.retryable:
                    raise TransportError(
                        f"{self.capability} request failed: {exc}", retryable=False
                    ) from exc
                if attempt == policy.max_attempts:
                    raise TransportError(
                        f"{self.capability} request failed after "
                        f"{policy.max_attempts} attempts: {exc}",
                        retryable=True,
                    ) from exc
                self._sleep(policy.delay(attempt))
        raise AssertionError("unreachable")

    def _fetch(self, body: dict, parse: Callable[[dict], object], use_cache: bool = True):
        """Cache-through request. Responses that fail parsing are not cached."""
        key = cache_key(self.capability, self.config.model_name, body)
        if use_cache:
            hit = self.cache.get(self.capability, key)
            if hit is not None:
                return parse(hit)
        response = self._send_with_retry(body)
        value = parse(response)
        if use_cache:
            self.cache.put(self.capability, key, body, response)
        return value


class EmbeddingClient(_ProviderClient):
    capability = "embeddings"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._dim_lock = threading.Lock()
        self._seen_dim: int | None = None

    def _parse(self, response: dict) -> EmbeddingVector:
        try:
            values = response["data"][0]["embedding"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(
                f"malformed embedding response: {exc!r}", retryable=False
            ) from exc
        if not isinstance(values, list) or not values:
            raise TransportError(
                "embedding response carries no values", retryable=False
            )
        vector = EmbeddingVector(
            values=tuple(float(v) for v in values),
            dim=len(values),
            model_tag=self.config.model_name,
        )
        with self._dim_lock:
            if self._seen_dim is None:
                self._seen_dim = vector.dim
            elif self._seen_dim != vector.dim:
                raise DimensionMismatch(
                    f"model {self.config.model_name!r} returned dim {vector.dim}, "
                    f"earlier responses had dim {self._seen_dim}"
                )
        return vector

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        """Embed texts in input order. Duplicate texts hit the backend once."""
        if not texts:
            raise ValueError("embed_batch needs at least one text")
        for i, text in enumerate(texts):
            if not isinstance(text, str) or not text.strip():
                raise ValueError(f"text at position {i} is empty")

        unique = list(dict.fromkeys(texts))
        results: dict[str, EmbeddingVector] = {}

        def one(text: str) -> tuple[str, EmbeddingVector]:
            body = {"model": self.config.model_name, "input": [text]}
            return text, self._fetch(body, self._parse)

        workers = max(1, self.config.max_parallel)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for text, vector in pool.map(one, unique):
                results[text] = vector
        return [results[text] for text in texts]


class CompletionClient(_ProviderClient):
    capability = "completions"

    def _parse(self, response: dict) -> str:
        if "refusal" in response:
            raise ProviderRefusal(str(response["refusal"]))
        text = response.get("text")
        if not isinstance(text, str):
            raise TransportError(
                "completion response carries no text field", retryable=False
            )
        return text

    def complete(
        self,
        prompt: str,
        max_tokens: int = 16,
        temperature: float = 0.0,
    ) -> str:
        """One completion. Only temperature-0 requests are cached."""
        if not prompt:
            raise ValueError("prompt must be non-empty")
        if temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {temperature}")
        if max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
        body = {
            "model": self.config.model_name,
            "prompt": prompt,
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        return self._fetch(body, self._parse, use_cache=(temperature == 0))


class ScoringClient(_ProviderClient):
    capability = "scores"

    def _parse(self, response: dict) -> ScoreResult:
        logprobs = response.get("logprobs")
        if not isinstance(logprobs, list) or not logprobs:
            raise TransportError(
                "scoring response carries no logprobs", retryable=False
            )
        total = float(sum(logprobs))
        from_mock = bool(response.get("mock"))
        if total > 0 and not from_mock:
            raise TransportError(
                f"scoring response total logprob {total} is positive, which no "
                f"probability model can produce",
                retryable=False,
            )
        return ScoreResult(
            total_logprob=total, token_count=len(logprobs), from_mock=from_mock
        )

    def score_output(self, prefix: str, target: str) -> ScoreResult:
        """Log-probability of `target` as the continuation of `prefix`."""
        if not prefix:
            raise ValueError("prefix must be non-empty")
        if not target:
            raise ValueError("target must be non-empty")
        body = {
            "model": self.config.model_name,
            "prompt": prefix,
            "echo_target": target,
            "logprobs": True,
        }
        return self._fetch(body, self._parse)
