"""Deterministic mock model with a planted commitment point and forcing point.

Each registered problem gets a fixed-length reasoning trace made of ``" t<id>"``
tokens followed by one ``"\\n\\boxed{<answer>}"`` token.  The mock locates the
prefix inside any prompt by counting those tokens after the problem prompt, so
it depends only on *how much* of the trace is present, never on its content.
Shuffling or replacing tail tokens therefore leaves its behaviour unchanged.

Free continuations reach the planted answer with the probability given by the
recoverability curve at the prefix position; greedy forced decoding returns the
planted answer only once the prefix reaches ``forceable_fraction``.  Between
the two fractions the detection-extraction gap is planted by construction.
"""

from __future__ import annotations

import hashlib
import math
import random
import re
from dataclasses import dataclass
from typing import Sequence

from ..core import ContractViolation, normalize_answer, prefix_length
from .base import (
    Backend,
    Capabilities,
    GenerationRequest,
    GenerationResult,
    TopK,
    Usage,
    truncate_tokens_at_stop,
)

_TRACE_TOKEN = re.compile(r"(?<!\S)(?:t\d+|\\boxed\{[^{}\s]*\})(?!\S)")
_SAFE_ANSWER = re.compile(r"^[^{}\s]+$")


@dataclass(frozen=True)
class MockModelSpec:
    answer: str
    distractors: tuple[str, ...] = ("0", "1", "2")
    commit_fraction: float = 0.2
    forceable_fraction: float = 0.4
    # (fraction, probability) breakpoints; None means a 0 -> 1 step at commit_fraction
    recoverability_curve: tuple[tuple[float, float], ...] | None = None
    curve_kind: str = "step"  # step | table | logistic
    logistic_steepness: float = 20.0
    seed: int = 0
    rollout_length: int = 100
    cold_start_accuracy: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "answer", normalize_answer(self.answer).normalized)
        object.__setattr__(self, "distractors", tuple(normalize_answer(d).normalized for d in self.distractors))
        if self.recoverability_curve is not None:
            object.__setattr__(
                self, "recoverability_curve", tuple(sorted((float(f), float(p)) for f, p in self.recoverability_curve))
            )
        for a in (self.answer, *self.distractors):
            if not _SAFE_ANSWER.match(a):
                raise ContractViolation(f"mock answers must be brace- and space-free: {a!r}")
        if not self.distractors:
            raise ContractViolation("mock needs at least one distractor")
        if self.answer in self.distractors:
            raise ContractViolation("planted answer must differ from every distractor")
        if not 0.0 < self.commit_fraction < 1.0 or not 0.0 < self.forceable_fraction < 1.0:
            raise ContractViolation("commit and forceable fractions must lie in (0, 1)")
        if self.forceable_fraction < self.commit_fraction:
            raise ContractViolation("forceable_fraction must be >= commit_fraction (gap must be nonnegative)")
        if self.curve_kind not in ("step", "table", "logistic"):
            raise ContractViolation(f"unknown curve kind {self.curve_kind!r}")
        if self.curve_kind == "table" and not self.recoverability_curve:
            raise ContractViolation("table curve needs breakpoints")
        for _, p in self.recoverability_curve or ():
            if not 0.0 <= p <= 1.0:
                raise ContractViolation("curve values must lie in [0, 1]")
        if self.rollout_length < 2:
            raise ContractViolation("rollout_length must be >= 2")
        if not 0.0 <= self.cold_start_accuracy <= 1.0:
            raise ContractViolation("cold_start_accuracy must lie in [0, 1]")

    @property
    def reasoning_tokens(self) -> int:
        return self.rollout_length - 1

    def _token_index(self, fraction: float) -> int:
        return prefix_length(self.rollout_length, fraction) if fraction > 0 else 0

    def committed(self, k: int) -> bool:
        return k >= self._token_index(self.commit_fraction)

    def forceable(self, k: int) -> bool:
        return k >= self._token_index(self.forceable_fraction)

    def recoverability(self, k: int) -> float:
        """Probability that a free continuation from a k-token prefix is correct."""
        T = self.rollout_length
        if self.curve_kind == "logistic":
            x = (k + 0.5) / T - self.commit_fraction
            return 1.0 / (1.0 + math.exp(-self.logistic_steepness * x))
        if self.curve_kind == "table":
            value = 0.0
            for f, p in self.recoverability_curve or ():
                if k >= self._token_index(f):
                    value = p
            return value
        return 1.0 if self.committed(k) else 0.0


def _rng(*parts: object) -> random.Random:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(h, "big"))


def _trace_tokens(rng: random.Random, start: int, stop: int) -> list[str]:
    a = rng.randrange(1, 997)
    b = rng.randrange(997)
    return [f" t{(a * j + b) % 997}" for j in range(start, stop)]


def _answer_token(answer: str) -> str:
    return "\n\\boxed{" + answer + "}"


class MockBackend(Backend):
    capabilities = Capabilities(sampling=True, greedy=True, top_logprobs=True, scoring=True, multi_sample=True)

    def __init__(self, specs: dict[str, MockModelSpec] | None = None):
        super().__init__()
        self._specs: dict[str, MockModelSpec] = {}
        self._by_head: dict[str, list[str]] = {}
        self._short: set[int] = set()
        for prompt, spec in (specs or {}).items():
            self.register(prompt, spec)

    _HEAD = 48

    def register(self, prompt: str, spec: MockModelSpec) -> None:
        if prompt not in self._specs:
            if len(prompt) < self._HEAD:
                self._short.add(len(prompt))
            else:
                self._by_head.setdefault(prompt[: self._HEAD], []).append(prompt)
        self._specs[prompt] = spec

    def locate(self, prompt: str) -> tuple[str, MockModelSpec, int, str]:
        """Return (problem prompt, spec, prefix token count, remainder text)."""
        cands = list(self._by_head.get(prompt[: self._HEAD], ()))
        cands += [prompt[:n] for n in self._short if prompt[:n] in self._specs]
        for cand in sorted(cands, key=len, reverse=True):
            if prompt.startswith(cand):
                rest = prompt[len(cand):]
                k = len(_TRACE_TOKEN.findall(rest))
                return cand, self._specs[cand], min(k, self._specs[cand].reasoning_tokens), rest
        raise ContractViolation("mock backend has no problem registered for this prompt")

    # -- sampling -------------------------------------------------------------

    def _completion(
        self, prompt: str, request: GenerationRequest, index: int
    ) -> tuple[tuple[str, ...], tuple[TopK, ...] | None]:
        base, spec, k, rest = self.locate(prompt)
        rng = _rng("sample", spec, prompt, request.temperature, request.max_tokens, request.stop_sequences, index)
        cold = rest == ""
        if cold:
            correct = rng.random() < spec.cold_start_accuracy
        else:
            correct = rng.random() < spec.recoverability(k)
        answer = spec.answer if correct else spec.distractors[rng.randrange(len(spec.distractors))]
        tokens = _trace_tokens(rng, k, spec.reasoning_tokens) + [_answer_token(answer)]
        tokens = list(truncate_tokens_at_stop(tokens[: request.max_tokens], request.stop_sequences))
        top = None
        if request.want_top_logprobs:
            top = tuple(self._topk(spec, k + j, tok, request.want_top_logprobs) for j, tok in enumerate(tokens))
        return tuple(tokens), top

    @staticmethod
    def _topk(spec: MockModelSpec, position: int, token: str, k: int) -> TopK:
        if spec.committed(position):
            p1, rest, tail = 0.90, 0.08, 0.02
        else:
            p1, rest, tail = 0.40, 0.45, 0.15
        if k == 1:
            return TopK(((token, math.log(p1)),), 1.0 - p1)
        each = rest / (k - 1)
        entries = [(token, math.log(p1))] + [(f" alt{i}", math.log(each)) for i in range(1, k)]
        return TopK(tuple(entries), tail)

    def _sample(self, request: GenerationRequest, sample_offset: int = 0) -> GenerationResult:
        if request.temperature == 0.0:
            return self._greedy(request)
        comps = [self._completion(request.prompt, request, sample_offset + i) for i in range(request.n_samples)]
        toks = tuple(c[0] for c in comps)
        top = tuple(c[1] for c in comps) if request.want_top_logprobs else None
        usage = Usage(
            prompt_tokens=len(request.prompt.split()),
            completion_tokens=sum(len(t) for t in toks),
        )
        self.telemetry.record(1, usage)
        return GenerationResult(
            texts=tuple("".join(t) for t in toks), tokens_per_completion=toks, usage=usage, top_logprobs=top
        )

    def _greedy(self, request: GenerationRequest) -> GenerationResult:
        _, spec, k, rest = self.locate(request.prompt)
        if spec.forceable(k) and rest != "":
            answer = spec.answer
        else:
            answer = spec.distractors[_rng("greedy", spec.seed, spec.answer).randrange(len(spec.distractors))]
        raw = [answer, "}", " extra"]
        tokens = truncate_tokens_at_stop(raw[: request.max_tokens], request.stop_sequences)
        usage = Usage(len(request.prompt.split()), len(tokens))
        self.telemetry.record(1, usage)
        return GenerationResult(texts=("".join(tokens),), tokens_per_completion=(tokens,), usage=usage)

    def score_tokens(self, prompt: str, target_tokens: Sequence[str]) -> list[float]:
        if not target_tokens:
            return []
        _, spec, k, _ = self.locate(prompt)
        if not spec.committed(k):
            return [-math.log(1 + len(spec.distractors))] * len(target_tokens)
        planted = normalize_answer("".join(target_tokens)).normalized == spec.answer
        lp = math.log(0.99) if planted else math.log(0.01 / len(spec.distractors))
        return [lp] * len(target_tokens)


def build_population(
    n_problems: int,
    *,
    commit_fraction: float = 0.1,
    forceable_fraction: float = 0.4,
    rollout_length: int = 100,
    cold_start_accuracy: float = 1.0,
    seed: int = 0,
    benchmark: str = "mock",
    n_distractors: int = 3,
    **spec_kwargs,
):
    """Problems with answers -k and a backend that knows each of them."""
    from ..core import ProblemRecord

    problems = []
    backend = MockBackend()
    for i in range(n_problems):
        answer = str(-(i + 1))
        prompt = f"Problem mock-{i:04d}: compute the planted value.\n"
        if n_distractors == 3:
            distractors = (str(i + 1), str(2 * i + 3), "0")
        else:
            distractors = tuple(str(i + 1 + 1000 * j) for j in range(n_distractors))
        spec = MockModelSpec(
            answer=answer,
            distractors=distractors,
            commit_fraction=commit_fraction,
            forceable_fraction=forceable_fraction,
            rollout_length=rollout_length,
            cold_start_accuracy=cold_start_accuracy,
            seed=seed * 100003 + i,
            **spec_kwargs,
        )
        problems.append(ProblemRecord(id=f"mock-{i:04d}", prompt=prompt, ground_truth=answer, benchmark=benchmark))
        backend.register(prompt, spec)
    return problems, backend
