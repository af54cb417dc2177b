"""Shared provider types: configs, result values, and the error taxonomy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol


class ProviderError(Exception):
    """Base class for all provider failures."""


class TransportError(ProviderError):
    """Network or protocol failure talking to a provider.

    `retryable` marks failures worth retrying (connection errors, HTTP 429,
    HTTP 5xx) as opposed to permanent ones (other 4xx, malformed payloads).
    """

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class ProviderRefusal(ProviderError):
    """The provider explicitly declined to answer. Distinct from empty output."""


class CapabilityUnsupported(ProviderError):
    """The configured provider does not offer the requested capability."""


class DimensionMismatch(ProviderError):
    """An embedding response's dimension differs from earlier responses."""


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: attempt i sleeps base_delay * 2**(i-1) seconds."""

    max_attempts: int = 3
    base_delay: float = 0.5

    def delay(self, attempt: int) -> float:
        return self.base_delay * (2 ** (attempt - 1))


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = ""
    model_name: str = "mock"
    api_key_env: str = ""
    max_parallel: int = 4
    cache_dir: str = ""
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 60.0


@dataclass(frozen=True)
class EmbeddingVector:
    """A dense embedding plus the model tag it came from."""

    values: tuple[float, ...]
    dim: int
    model_tag: str

    def __post_init__(self) -> None:
        if len(self.values) != self.dim:
            raise ValueError(
                f"embedding has {len(self.values)} values but dim={self.dim}"
            )
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains non-finite values")


@dataclass(frozen=True)
class ScoreResult:
    """Log-probability of a target continuation under a scoring model."""

    total_logprob: float
    token_count: int
    from_mock: bool = False

    def __post_init__(self) -> None:
        if self.token_count < 1:
            raise ValueError("token_count must be >= 1")

    def per_token(self) -> float:
        return self.total_logprob / self.token_count


class Transport(Protocol):
    """Anything that can exchange one JSON request for one JSON response."""

    def send(self, body: dict) -> dict: ...
