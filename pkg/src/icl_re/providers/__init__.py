from icl_re.providers.base import (
    CapabilityUnsupported,
    DimensionMismatch,
    EmbeddingVector,
    ProviderConfig,
    ProviderError,
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

__all__ = [
    "CapabilityUnsupported",
    "CompletionClient",
    "DimensionMismatch",
    "EmbeddingClient",
    "EmbeddingVector",
    "ProviderConfig",
    "ProviderError",
    "ProviderRefusal",
    "ResponseCache",
    "RetryPolicy",
    "ScoreResult",
    "ScoringClient",
    "TransportError",
    "UnsupportedCapabilityTransport",
    "cache_key",
]
