"""Request/result types and the backend interface every sampler implements."""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

from ..core import ContractViolation


class BackendError(RuntimeError):
    pass


class RetryableError(BackendError):
    """Transport failure that survived every retry attempt."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class ProtocolError(BackendError):
    """Upstream answered, but with a payload we cannot interpret."""


class UnsupportedCapability(BackendError):
    pass


@dataclass(frozen=True)
class Capabilities:
    sampling: bool = True
    greedy: bool = True
    top_logprobs: bool = False
    scoring: bool = False
    multi_sample: bool = True  # n > 1 within one request


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    temperature: float = 1.0
    max_tokens: int = 256
    n_samples: int = 1
    stop_sequences: tuple[str, ...] = ()
    want_top_logprobs: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ContractViolation("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ContractViolation("max_tokens must be >= 1")
        if self.n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        if self.want_top_logprobs is not None and self.want_top_logprobs < 1:
            raise ContractViolation("want_top_logprobs must be >= 1 when set")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))


@dataclass(frozen=True)
class TopK:
    """Top-k alternatives at one generated position."""

    entries: tuple[tuple[str, float], ...]  # (token, logprob)
    tail_mass: float

    @classmethod
    def from_logprobs(cls, entries: Sequence[tuple[str, float]]) -> "TopK":
        # some APIs omit the tail; derive it and clamp
        tail = 1.0 - math.fsum(math.exp(lp) for _, lp in entries)
        return cls(tuple((t, float(lp)) for t, lp in entries), min(1.0, max(0.0, tail)))

    @property
    def probs(self) -> list[float]:
        return [math.exp(lp) for _, lp in self.entries]


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class GenerationResult:
    texts: tuple[str, ...]
    tokens_per_completion: tuple[tuple[str, ...], ...]
    usage: Usage
    top_logprobs: tuple[tuple[TopK, ...], ...] | None = None

    def __post_init__(self) -> None:
        if len(self.texts) != len(self.tokens_per_completion):
            raise ProtocolError("texts and token lists differ in length")
        if self.top_logprobs is not None and len(self.top_logprobs) != len(self.texts):
            raise ProtocolError("top_logprobs must have one entry per completion")

    @property
    def n(self) -> int:
        return len(self.texts)


def truncate_at_stop(text: str, stop: Sequence[str]) -> str:
    cut = len(text)
    for s in stop:
        if s:
            i = text.find(s)
            if i != -1:
                cut = min(cut, i)
    return text[:cut]


def truncate_tokens_at_stop(tokens: Sequence[str], stop: Sequence[str]) -> tuple[str, ...]:
    """Drop everything from the first stop sequence on, splitting a token if needed."""
    text = "".join(tokens)
    keep = len(truncate_at_stop(text, stop))
    out: list[str] = []
    used = 0
    for tok in tokens:
        if used + len(tok) <= keep:
            out.append(tok)
            used += len(tok)
        else:
            if keep > used:
                out.append(tok[: keep - used])
            break
    return tuple(out)


@dataclass
class Telemetry:
    requests: int = 0
    attempts: int = 0
    retries: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record(self, attempts: int, usage: Usage | None) -> None:
        with self._lock:
            self.requests += 1
            self.attempts += attempts
            self.retries += attempts - 1
            if usage is not None:
                self.prompt_tokens += usage.prompt_tokens
                self.completion_tokens += usage.completion_tokens


class Backend:
    """Black-box sampler. Subclasses implement ``_sample``; the rest is shared."""

    capabilities = Capabilities()

    def __init__(self) -> None:
        self.telemetry = Telemetry()

    def sample(self, request: GenerationRequest) -> GenerationResult:
        if not self.capabilities.sampling:
            raise UnsupportedCapability("backend cannot sample")
        if request.want_top_logprobs and not self.capabilities.top_logprobs:
            raise UnsupportedCapability("backend does not report top-k logprobs")
        if request.n_samples > 1 and not self.capabilities.multi_sample:
            return self._fan_out(request)
        return self._sample(request)

    def _fan_out(self, request: GenerationRequest) -> GenerationResult:
        from concurrent.futures import ThreadPoolExecutor
        from dataclasses import replace

        single = replace(request, n_samples=1)
        with ThreadPoolExecutor(max_workers=request.n_samples) as pool:
            parts = list(pool.map(lambda i: self._sample(single, sample_offset=i), range(request.n_samples)))
        top = None
        if all(p.top_logprobs is not None for p in parts):
            top = tuple(p.top_logprobs[0] for p in parts)
        return GenerationResult(
            texts=tuple(p.texts[0] for p in parts),
            tokens_per_completion=tuple(p.tokens_per_completion[0] for p in parts),
            usage=Usage(
                sum(p.usage.prompt_tokens for p in parts),
                sum(p.usage.completion_tokens for p in parts),
            ),
            top_logprobs=top,
        )

    def _sample(self, request: GenerationRequest, sample_offset: int = 0) -> GenerationResult:
        raise NotImplementedError

    def greedy_decode(self, prompt: str, stop: Sequence[str] = ("}",), max_tokens: int = 64) -> str:
        if not self.capabilities.greedy:
            raise UnsupportedCapability("backend cannot decode greedily")
        req = GenerationRequest(
            prompt=prompt, temperature=0.0, max_tokens=max_tokens, n_samples=1, stop_sequences=tuple(stop)
        )
        res = self._sample(req)
        # enforce the stop rule client-side too; not every provider honours it
        return truncate_at_stop(res.texts[0], stop)

    def score_tokens(self, prompt: str, target_tokens: Sequence[str]) -> list[float]:
        raise UnsupportedCapability(f"{type(self).__name__} cannot teacher-force score tokens")


T = TypeVar("T")


def with_retries(
    fn: Callable[[], T],
    *,
    max_attempts: int = 5,
    base_delay: float = 0.5,
    max_delay: float = 30.0,
    retry_on: tuple[type[BaseException], ...] = (OSError,),
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[T, int]:
    """Call ``fn`` with exponential backoff. Returns (result, attempts used)."""
    last: BaseException | None = None
    for attempt in range(1, max_attempts + 1):
        try:
            return fn(), attempt
        except retry_on as exc:
            last = exc
            if attempt < max_attempts:
                sleep(min(max_delay, base_delay * 2 ** (attempt - 1)))
    raise RetryableError(f"request failed: {last}", attempts=max_attempts) from last


class TokenBucket:
    """Blocking token-bucket limiter; ``rate`` requests per second."""

    def __init__(
        self,
        rate: float,
        capacity: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ContractViolation("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Take one token, sleeping as needed. Returns seconds waited."""
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return waited
                need = (1.0 - self._tokens) / self.rate
            self._sleep(need)
            waited += need
