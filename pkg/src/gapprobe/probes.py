"""The four black-box probes: PSC, EFA, ATLT and entropy dynamics."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Hashable, Iterable, Sequence, TypeVar

from .core import Answer, ContractViolation, ProblemRecord, grade, majority_vote, normalize_answer, prefix_length
from .modelclient.base import Backend, BackendError, GenerationRequest, TopK, UnsupportedCapability

EFA_STOP = ("}",)
EFA_MAX_TOKENS = 64
PSC_SAMPLES = 8
CONTINUATION_TEMPERATURE = 1.0


class ProbeError(RuntimeError):
    def __init__(self, message: str, partial: Sequence[Answer] = ()):
        super().__init__(message)
        self.partial = tuple(partial)


@dataclass(frozen=True)
class SuffixTemplate:
    id: str
    text: str


ORIGINAL = SuffixTemplate("original", "\nTherefore, the final answer is \\boxed{")
TEMPLATES: dict[str, SuffixTemplate] = {
    t.id: t
    for t in (
        ORIGINAL,
        SuffixTemplate("natural", "\nSo the final answer is \\boxed{"),
        SuffixTemplate("soft", "\nThe answer is "),
        SuffixTemplate("plain", "\n"),
        SuffixTemplate("direct", "\nFinal answer: "),
    )
}


def register_template(template: SuffixTemplate) -> None:
    if template.id in TEMPLATES:
        raise ContractViolation(f"template id {template.id!r} already registered")
    TEMPLATES[template.id] = template


# -- answer extraction from free continuations --------------------------------


def last_boxed(text: str) -> str | None:
    """Content of the last balanced ``\\boxed{...}``, or None."""
    start = text.rfind("\\boxed{")
    while start != -1:
        i = start + len("\\boxed{")
        depth = 1
        j = i
        while j < len(text):
            if text[j] == "{":
                depth += 1
            elif text[j] == "}":
                depth -= 1
                if depth == 0:
                    return text[i:j]
            j += 1
        # unbalanced; try an earlier one
        start = text.rfind("\\boxed{", 0, start)
    return None


_ANSWER_IS = re.compile(r"answer is", re.IGNORECASE)


def extract_answer(completion: str) -> Answer:
    boxed = last_boxed(completion)
    if boxed is not None:
        return normalize_answer(boxed)
    hits = list(_ANSWER_IS.finditer(completion))
    if hits:
        tail = completion[hits[-1].end():].split("\n", 1)[0]
        return normalize_answer(tail.strip().lstrip(":").strip())
    lines = [ln for ln in completion.strip().splitlines() if ln.strip()]
    return normalize_answer(lines[-1] if lines else "")


# -- PSC ------------------------------------------------------------------------


def continuation_budget(total_tokens: int, fraction: float) -> int:
    """Twice the remaining trace length, at least one token."""
    return max(1, 2 * (total_tokens - prefix_length(total_tokens, fraction)))


@dataclass(frozen=True)
class PscResult:
    fraction: float
    sample_answers: tuple[Answer, ...]
    correct_count: int
    psc_value: float
    self_agreement: float
    majority: Answer
    tied: bool
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        n = len(self.sample_answers)
        if not 0 <= self.correct_count <= n:
            raise ContractViolation("correct_count out of range")

    @property
    def n(self) -> int:
        return len(self.sample_answers)

    @property
    def majority_count(self) -> int:
        return round(self.self_agreement * self.n)

    def signal(self, mode: str = "deployment") -> float:
        """Trigger statistic: self-agreement in deployment, accuracy offline."""
        if mode == "deployment":
            return self.self_agreement
        if mode == "offline":
            return self.psc_value
        raise ContractViolation(f"unknown trigger mode {mode!r}")

    def to_record(self) -> dict[str, Any]:
        return {
            "fraction": self.fraction,
            "sample_answers": [a.normalized for a in self.sample_answers],
            "sample_raw": [a.raw for a in self.sample_answers],
            "correct_count": self.correct_count,
            "psc_value": self.psc_value,
            "self_agreement": self.self_agreement,
            "majority": self.majority.normalized,
            "tied": self.tied,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }

    @classmethod
    def from_record(cls, d: dict[str, Any]) -> "PscResult":
        raws = d.get("sample_raw", d["sample_answers"])
        return cls(
            fraction=float(d["fraction"]),
            sample_answers=tuple(Answer(r, n) for r, n in zip(raws, d["sample_answers"])),
            correct_count=int(d["correct_count"]),
            psc_value=float(d["psc_value"]),
            self_agreement=float(d["self_agreement"]),
            majority=normalize_answer(d["majority"]),
            tied=bool(d["tied"]),
            prompt_tokens=int(d.get("prompt_tokens", 0)),
            completion_tokens=int(d.get("completion_tokens", 0)),
        )


def summarize_samples(
    fraction: float,
    answers: Sequence[Answer],
    ground_truth: str,
    grader: str = "exact",
    prompt_tokens: int = 0,
    completion_tokens: int = 0,
) -> PscResult:
    n = len(answers)
    if n < 1:
        raise ContractViolation("need at least one sample")
    correct = sum(grade(a, ground_truth, grader) for a in answers)
    vote = majority_vote(answers)
    return PscResult(
        fraction=fraction,
        sample_answers=tuple(answers),
        correct_count=correct,
        psc_value=correct / n,
        self_agreement=vote.count / n,
        majority=vote.winner,
        tied=vote.tied,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
    )


def run_psc(
    backend: Backend,
    problem: ProblemRecord,
    prefix: str,
    fraction: float,
    *,
    n: int = PSC_SAMPLES,
    grader: str = "exact",
    max_tokens: int = 4096,
    temperature: float = CONTINUATION_TEMPERATURE,
) -> PscResult:
    if n < 1:
        raise ContractViolation("n must be >= 1")
    req = GenerationRequest(
        prompt=problem.prompt + prefix, temperature=temperature, max_tokens=max_tokens, n_samples=n
    )
    try:
        res = backend.sample(req)
    except BackendError as exc:
        raise ProbeError(f"PSC failed for {problem.id} at f={fraction}: {exc}") from exc
    answers = [extract_answer(t) for t in res.texts]
    return summarize_samples(
        fraction, answers, problem.ground_truth, grader, res.usage.prompt_tokens, res.usage.completion_tokens
    )


# -- EFA ------------------------------------------------------------------------


@dataclass(frozen=True)
class EfaResult:
    fraction: float
    suffix_template: str
    raw_output: str
    answer: Answer
    correct: bool

    def to_record(self) -> dict[str, Any]:
        return {
            "fraction": self.fraction,
            "suffix_template": self.suffix_template,
            "raw_output": self.raw_output,
            "answer": self.answer.normalized,
            "correct": self.correct,
        }

    @classmethod
    def from_record(cls, d: dict[str, Any]) -> "EfaResult":
        return cls(
            fraction=float(d["fraction"]),
            suffix_template=d["suffix_template"],
            raw_output=d["raw_output"],
            answer=normalize_answer(d["raw_output"]),
            correct=bool(d["correct"]),
        )


def run_efa(
    backend: Backend,
    problem: ProblemRecord,
    prefix: str,
    fraction: float,
    template: SuffixTemplate | str = ORIGINAL,
    *,
    grader: str = "exact",
    max_tokens: int = EFA_MAX_TOKENS,
) -> EfaResult:
    if isinstance(template, str):
        try:
            template = TEMPLATES[template]
        except KeyError:
            raise ContractViolation(f"unregistered suffix template {template!r}") from None
    try:
        raw = backend.greedy_decode(problem.prompt + prefix + template.text, stop=EFA_STOP, max_tokens=max_tokens)
    except BackendError as exc:
        raise ProbeError(f"EFA failed for {problem.id} at f={fraction}: {exc}") from exc
    ans = normalize_answer(raw)
    return EfaResult(fraction, template.id, raw, ans, grade(ans, problem.ground_truth, grader))


# -- ATLT -----------------------------------------------------------------------


@dataclass(frozen=True)
class AtltResult:
    fraction: float
    mean_logprob: float | None
    status: str  # "ok" | "unsupported"

    def to_record(self) -> dict[str, Any]:
        return {"fraction": self.fraction, "mean_logprob": self.mean_logprob, "status": self.status}


def run_atlt(
    backend: Backend, problem: ProblemRecord, prefix: str, answer_tokens: Sequence[str], fraction: float = 0.0
) -> AtltResult:
    """Mean teacher-forced logprob of the answer tokens given the prefix."""
    if not answer_tokens:
        raise ContractViolation("answer_tokens must be nonempty")
    try:
        lps = backend.score_tokens(problem.prompt + prefix, list(answer_tokens))
    except UnsupportedCapability:
        return AtltResult(fraction, None, "unsupported")
    except BackendError as exc:
        raise ProbeError(f"ATLT failed for {problem.id}: {exc}") from exc
    return AtltResult(fraction, math.fsum(lps) / len(lps), "ok")


# -- entropy dynamics ---------------------------------------------------------


def entropy_from_topk(topk: Sequence[float] | Sequence[tuple[str, float]], tail_mass: float = 0.0) -> float:
    """Entropy in nats of the top-k probabilities plus a lumped tail bucket."""
    probs = [p[1] if isinstance(p, tuple) else p for p in topk]
    if any(p < 0 for p in probs) or tail_mass < 0:
        raise ContractViolation("probabilities must be nonnegative")
    if math.fsum(probs) + tail_mass > 1 + 1e-9:
        raise ContractViolation("top-k mass plus tail exceeds 1")
    h = -math.fsum(p * math.log(p) for p in probs if p > 0)
    if tail_mass > 0:
        h -= tail_mass * math.log(tail_mass)
    return max(h, 0.0)


@dataclass(frozen=True)
class EntropySeries:
    per_token_entropy: tuple[float, ...]
    positions: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.per_token_entropy) != len(self.positions):
            raise ContractViolation("entropy and position lists differ in length")
        if any(h < 0 for h in self.per_token_entropy):
            raise ContractViolation("entropy must be nonnegative")

    def to_record(self) -> dict[str, Any]:
        return {"per_token_entropy": list(self.per_token_entropy), "positions": list(self.positions)}

    @classmethod
    def from_record(cls, d: dict[str, Any]) -> "EntropySeries":
        return cls(tuple(d["per_token_entropy"]), tuple(d["positions"]))


def entropy_series(top_logprobs: Sequence[TopK], start: int = 0) -> EntropySeries:
    values = tuple(entropy_from_topk(t.probs, t.tail_mass) for t in top_logprobs)
    return EntropySeries(values, tuple(range(start, start + len(values))))


def commit_entropy_ratio(series: EntropySeries, boundary: int) -> float | None:
    """Mean entropy at or after ``boundary`` over mean entropy before it."""
    pre = [h for h, p in zip(series.per_token_entropy, series.positions) if p < boundary]
    post = [h for h, p in zip(series.per_token_entropy, series.positions) if p >= boundary]
    if not pre or not post:
        return None
    mean_pre = math.fsum(pre) / len(pre)
    if mean_pre == 0:
        return None
    return (math.fsum(post) / len(post)) / mean_pre


# -- batch execution ------------------------------------------------------------

K = TypeVar("K", bound=Hashable)
R = TypeVar("R")


def run_batch(tasks: Iterable[tuple[K, Callable[[], R]]], parallelism: int = 4) -> dict[K, R]:
    """Run independent probes with at most ``parallelism`` in flight.

    Results are keyed by the caller's correlation key, so completion order
    never matters.
    """
    items = list(tasks)
    if parallelism <= 1:
        return {k: fn() for k, fn in items}
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = {k: pool.submit(fn) for k, fn in items}
        return {k: f.result() for k, f in futures.items()}
