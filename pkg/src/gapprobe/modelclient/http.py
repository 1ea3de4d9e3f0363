"""HTTP completion backend (OpenAI-style ``/completions`` by default).

Field names on the wire are remapped through ``HttpConfig.fields`` so other
provider dialects can be targeted without code changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import httpx

from .base import (
    Backend,
    Capabilities,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    TokenBucket,
    TopK,
    Usage,
    truncate_at_stop,
    with_retries,
)

DEFAULT_FIELDS: dict[str, str] = {
    "model": "model",
    "prompt": "prompt",
    "temperature": "temperature",
    "max_tokens": "max_tokens",
    "n": "n",
    "stop": "stop",
    "top_logprobs": "logprobs",
    "echo": "echo",
}

ENV_URL = "GAPPROBE_API_URL"
ENV_TOKEN = "GAPPROBE_API_KEY"


class _Transient(OSError):
    """HTTP status worth retrying (429 / 5xx)."""


@dataclass
class HttpConfig:
    url: str = ""
    token: str = ""
    model: str = ""
    fields: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FIELDS))
    timeout: float = 120.0
    max_attempts: int = 5
    backoff_base: float = 0.5
    requests_per_second: float | None = None
    supports_multi_sample: bool = True
    supports_top_logprobs: bool = True
    supports_scoring: bool = False

    @classmethod
    def from_env(cls, base: "HttpConfig | None" = None) -> "HttpConfig":
        cfg = base or cls()
        cfg.url = os.environ.get(ENV_URL, cfg.url)
        cfg.token = os.environ.get(ENV_TOKEN, cfg.token)
        return cfg


class HttpBackend(Backend):
    def __init__(
        self,
        config: HttpConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] | None = None,
    ):
        super().__init__()
        if not config.url:
            raise ValueError(f"no endpoint URL configured (set it in the config file or ${ENV_URL})")
        self.config = config
        self.capabilities = Capabilities(
            sampling=True,
            greedy=True,
            top_logprobs=config.supports_top_logprobs,
            scoring=config.supports_scoring,
            multi_sample=config.supports_multi_sample,
        )
        headers = {"Authorization": f"Bearer {config.token}"} if config.token else {}
        self._client = client or httpx.Client(timeout=config.timeout)
        self._headers = headers
        self._limiter = TokenBucket(config.requests_per_second) if config.requests_per_second else None
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    # -- wire -----------------------------------------------------------------

    def _payload(self, request: GenerationRequest, echo: bool = False) -> dict[str, Any]:
        f = self.config.fields
        body: dict[str, Any] = {
            f["prompt"]: request.prompt,
            f["temperature"]: request.temperature,
            f["max_tokens"]: request.max_tokens,
            f["n"]: request.n_samples,
        }
        if self.config.model:
            body[f["model"]] = self.config.model
        if request.stop_sequences:
            body[f["stop"]] = list(request.stop_sequences)
        if request.want_top_logprobs:
            body[f["top_logprobs"]] = request.want_top_logprobs
        if echo:
            body[f["echo"]] = True
        return body

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        def once() -> dict[str, Any]:
            if self._limiter is not None:
                self._limiter.acquire()
            try:
                resp = self._client.post(self.config.url, json=body, headers=self._headers)
            except httpx.TransportError as exc:
                raise _Transient(str(exc)) from exc
            if resp.status_code == 429 or resp.status_code >= 500:
                raise _Transient(f"HTTP {resp.status_code}")
            if resp.status_code >= 400:
                raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except json.JSONDecodeError as exc:
                raise ProtocolError(f"non-JSON response: {resp.text[:200]}") from exc

        kwargs: dict[str, Any] = {
            "max_attempts": self.config.max_attempts,
            "base_delay": self.config.backoff_base,
            "retry_on": (_Transient,),
        }
        if self._sleep is not None:
            kwargs["sleep"] = self._sleep
        payload, attempts = with_retries(once, **kwargs)
        usage = _parse_usage(payload)
        self.telemetry.record(attempts, usage)
        return payload

    def _sample(self, request: GenerationRequest, sample_offset: int = 0) -> GenerationResult:
        payload = self._post(self._payload(request))
        choices = _choices(payload)
        if len(choices) != request.n_samples:
            raise ProtocolError(f"asked for {request.n_samples} completions, got {len(choices)}")
        texts, toks, tops = [], [], []
        for ch in choices:
            text = ch.get("text")
            if not isinstance(text, str):
                raise ProtocolError("choice without a text field")
            lp = ch.get("logprobs") or {}
            tokens = lp.get("tokens")
            if tokens is None:
                tokens = [text]
            text = truncate_at_stop(text, request.stop_sequences)
            texts.append(text)
            toks.append(tuple(tokens))
            if request.want_top_logprobs:
                raw_top = lp.get("top_logprobs")
                if raw_top is None:
                    raise ProtocolError("top-k logprobs requested but missing from response")
                tops.append(tuple(TopK.from_logprobs(sorted(d.items(), key=lambda kv: -kv[1])) for d in raw_top))
        usage = _parse_usage(payload) or Usage(0, sum(len(t) for t in toks))
        return GenerationResult(
            texts=tuple(texts),
            tokens_per_completion=tuple(toks),
            usage=usage,
            top_logprobs=tuple(tops) if request.want_top_logprobs else None,
        )

    def score_tokens(self, prompt: str, target_tokens: Sequence[str]) -> list[float]:
        """Teacher-forced scoring through ``echo`` of prompt+target."""
        if not target_tokens:
            return []
        if not self.capabilities.scoring:
            return super().score_tokens(prompt, target_tokens)
        req = GenerationRequest(prompt=prompt + "".join(target_tokens), temperature=0.0, max_tokens=1)
        payload = self._post(self._payload(req, echo=True))
        ch = _choices(payload)[0]
        lp = ch.get("logprobs") or {}
        tokens, logprobs = lp.get("tokens"), lp.get("token_logprobs")
        if tokens is None or logprobs is None:
            raise ProtocolError("echo response lacks token logprobs")
        # walk back from the end of the echoed prompt until the target text is covered
        target = "".join(target_tokens)
        text_end = len(prompt) + len(target)
        acc, out = 0, []
        pos = 0
        spans = []
        for tok, l in zip(tokens, logprobs):
            spans.append((pos, pos + len(tok), l))
            pos += len(tok)
        for start, end, l in spans:
            if start >= len(prompt) and end <= text_end:
                if l is None:
                    raise ProtocolError("missing logprob for target token")
                out.append(float(l))
                acc += end - start
        if acc != len(target):
            raise ProtocolError("target tokens do not align with provider tokenization")
        return out


def _choices(payload: dict[str, Any]) -> list[dict[str, Any]]:
    choices = payload.get("choices")
    if not isinstance(choices, list) or not choices:
        raise ProtocolError("response has no choices")
    # providers may return choices out of order; the index is the correlation id
    try:
        return sorted(choices, key=lambda c: int(c.get("index", 0)))
    except (TypeError, ValueError) as exc:
        raise ProtocolError("malformed choice index") from exc


def _parse_usage(payload: dict[str, Any]) -> Usage | None:
    u = payload.get("usage")
    if not isinstance(u, dict):
        return None
    return Usage(int(u.get("prompt_tokens", 0)), int(u.get("completion_tokens", 0)))
