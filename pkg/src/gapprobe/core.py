"""Domain types, answer normalization, grading and voting shared by every module."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence


class ContractViolation(ValueError):
    """A precondition of a pure operation was not met."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ProblemRecord:
    id: str
    prompt: str
    ground_truth: str
    difficulty: int | None = None
    benchmark: str = ""
    metadata: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        if not self.id:
            raise ContractViolation("problem id must be nonempty")
        if not self.ground_truth:
            raise ContractViolation(f"problem {self.id!r} has an empty ground truth")
        if self.difficulty is not None and not 1 <= self.difficulty <= 5:
            raise ContractViolation(f"difficulty must be in 1..5, got {self.difficulty}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "id": self.id,
            "prompt": self.prompt,
            "ground_truth": self.ground_truth,
            "benchmark": self.benchmark,
        }
        if self.difficulty is not None:
            out["difficulty"] = self.difficulty
        out.update(self.metadata)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ProblemRecord":
        known = {"id", "prompt", "ground_truth", "difficulty", "benchmark"}
        return cls(
            id=str(d["id"]),
            prompt=d["prompt"],
            ground_truth=str(d["ground_truth"]),
            difficulty=d.get("difficulty"),
            benchmark=d.get("benchmark", ""),
            metadata={k: v for k, v in d.items() if k not in known},
        )


def load_problems(path: str | Path) -> list[ProblemRecord]:
    """Read a JSONL dataset, one problem per line, rejecting duplicate ids."""
    problems: list[ProblemRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = ProblemRecord.from_dict(json.loads(line))
            if rec.id in seen:
                raise ContractViolation(f"{path}:{lineno}: duplicate problem id {rec.id!r}")
            seen.add(rec.id)
            problems.append(rec)
    return problems


def write_problems(path: str | Path, problems: Iterable[ProblemRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class Rollout:
    problem_id: str
    tokens: tuple[str, ...]
    text: str
    correct: bool
    temperature: float = 1.0
    index: int = 0
    answer: str = ""

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise ContractViolation("a rollout needs at least one token")
        if "".join(self.tokens) != self.text:
            raise ContractViolation(f"rollout tokens of {self.problem_id!r} do not concatenate to its text")

    @property
    def length(self) -> int:
        return len(self.tokens)

    def prefix(self, fraction: float) -> str:
        return "".join(self.tokens[: prefix_length(self.length, fraction)])

    def to_dict(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "index": self.index,
            "tokens": list(self.tokens),
            "correct": self.correct,
            "temperature": self.temperature,
            "answer": self.answer,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Rollout":
        tokens = tuple(d["tokens"])
        return cls(
            problem_id=d["problem_id"],
            tokens=tokens,
            text="".join(tokens),
            correct=bool(d["correct"]),
            temperature=float(d.get("temperature", 1.0)),
            index=int(d.get("index", 0)),
            answer=d.get("answer", ""),
        )


@dataclass(frozen=True)
class CheckpointGrid:
    fractions: tuple[float, ...]

    def __post_init__(self) -> None:
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if not fr:
            raise ContractViolation("checkpoint grid is empty")
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ContractViolation(f"grid fractions must lie in (0, 1): {fr}")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ContractViolation(f"grid fractions must be strictly increasing: {fr}")

    def __len__(self) -> int:
        return len(self.fractions)

    def __iter__(self) -> Iterator[float]:
        return iter(self.fractions)

    def index(self, fraction: float) -> int:
        for i, f in enumerate(self.fractions):
            if math.isclose(f, fraction, abs_tol=1e-12):
                return i
        raise KeyError(fraction)


DEFAULT_GRID = CheckpointGrid(tuple(round(0.1 * i, 2) for i in range(1, 10)))
FINE_GRID = CheckpointGrid(
    (0.02, 0.04, 0.05, 0.06, 0.08, 0.10, 0.12, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50)
)


def prefix_length(total_tokens: int, fraction: float) -> int:
    """Number of rollout tokens kept at a checkpoint: floor(fraction * T)."""
    if total_tokens < 1:
        raise ContractViolation(f"total_tokens must be >= 1, got {total_tokens}")
    if not 0.0 < fraction < 1.0:
        raise ContractViolation(f"fraction must lie in (0, 1), got {fraction}")
    # tolerance absorbs binary rounding, e.g. 0.29 * 100 == 28.999999999999996
    return math.floor(fraction * total_tokens + 1e-9)


@dataclass(frozen=True)
class Answer:
    raw: str
    normalized: str

    @classmethod
    def of(cls, raw: str) -> "Answer":
        return normalize_answer(raw)

    def __str__(self) -> str:
        return self.normalized


_BOXED = "\\boxed{"


def _normalize_once(s: str) -> str:
    s = s.strip()
    while s.startswith(_BOXED):
        s = s[len(_BOXED):].lstrip()
    # one pass over '}' and '.' together; sequential rstrips miss "x}."
    s = s.rstrip("}.")
    return " ".join(s.split())


def normalize_answer(raw: str) -> Answer:
    s = raw
    while True:
        nxt = _normalize_once(s)
        if nxt == s:
            break
        s = nxt
    return Answer(raw=raw, normalized=s)


def _as_answer(a: Answer | str) -> Answer:
    return a if isinstance(a, Answer) else normalize_answer(a)


NUMERIC_TOLERANCE = 1e-9

Grader = Callable[[str, str], bool]


def _parse_number(s: str) -> Fraction | None:
    try:
        return Fraction(s.replace(" ", ""))
    except (ValueError, ZeroDivisionError):
        return None


def _grade_exact(candidate: str, truth: str) -> bool:
    return candidate == truth


def _grade_numeric(candidate: str, truth: str) -> bool:
    a, b = _parse_number(candidate), _parse_number(truth)
    if a is None or b is None:
        return candidate == truth
    return abs(a - b) <= Fraction(NUMERIC_TOLERANCE)


GRADERS: dict[str, Grader] = {"exact": _grade_exact, "numeric": _grade_numeric}


def register_grader(mode: str, fn: Grader) -> None:
    """Add a richer equivalence checker, e.g. a symbolic one, under ``mode``."""
    GRADERS[mode] = fn


def grade(candidate: Answer | str, ground_truth: Answer | str, mode: str = "exact") -> bool:
    try:
        fn = GRADERS[mode]
    except KeyError:
        raise ConfigurationError(f"unknown grading mode {mode!r}; known: {sorted(GRADERS)}") from None
    return fn(_as_answer(candidate).normalized, _as_answer(ground_truth).normalized)


@dataclass(frozen=True)
class Vote:
    winner: Answer
    count: int
    tied: bool


def majority_vote(answers: Sequence[Answer | str]) -> Vote:
    """Plurality over normalized forms; ties go to the earliest-seen answer."""
    if not answers:
        raise ContractViolation("majority_vote needs at least one answer")
    normed = [_as_answer(a) for a in answers]
    counts = Counter(a.normalized for a in normed)
    top = max(counts.values())
    leaders = {k for k, c in counts.items() if c == top}
    first = next(a for a in normed if a.normalized in leaders)
    return Vote(winner=first, count=top, tied=len(leaders) > 1)
