from .base import (
    Backend,
    BackendError,
    Capabilities,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    RetryableError,
    TokenBucket,
    TopK,
    UnsupportedCapability,
    Usage,
    truncate_at_stop,
    with_retries,
)
from .http import HttpBackend, HttpConfig
from .mock import MockBackend, MockModelSpec, build_population

__all__ = [
    "Backend",
    "BackendError",
    "Capabilities",
    "GenerationRequest",
    "GenerationResult",
    "HttpBackend",
    "HttpConfig",
    "MockBackend",
    "MockModelSpec",
    "ProtocolError",
    "RetryableError",
    "TokenBucket",
    "TopK",
    "UnsupportedCapability",
    "Usage",
    "build_population",
    "truncate_at_stop",
    "with_retries",
]
