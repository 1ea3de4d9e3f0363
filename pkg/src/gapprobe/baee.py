"""Black-box adaptive early exit (BAEE), its baselines and cost accounting.

BAEE detects *and* extracts through free continuations: the exit answer is
always the majority vote over PSC samples.  Forced extraction appears only in
the two named EFA baselines below.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .core import (
    Answer,
    CheckpointGrid,
    ContractViolation,
    DEFAULT_GRID,
    ProblemRecord,
    Rollout,
    grade,
    majority_vote,
    normalize_answer,
    prefix_length,
)
from .modelclient.base import Backend, GenerationRequest
from .probes import (
    ORIGINAL,
    EfaResult,
    ProbeError,
    PscResult,
    SuffixTemplate,
    continuation_budget,
    extract_answer,
    run_efa,
    run_psc,
)
from .stats import hoeffding_bound, worst_case_tail


@dataclass(frozen=True)
class BaeePolicy:
    grid: CheckpointGrid = DEFAULT_GRID
    theta: float = 0.75
    n_samples: int = 8
    mode: str = "adaptive"  # adaptive | all_checkpoints
    tie_fallback: bool = True
    trigger: str = "deployment"  # deployment (self-agreement) | offline (correctness)
    on_probe_error: str = "skip"  # skip | raise

    def __post_init__(self) -> None:
        if not 0.0 < self.theta <= 1.0:
            raise ContractViolation("theta must lie in (0, 1]")
        if self.n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        m = self.theta * self.n_samples
        if abs(m - round(m)) > 1e-9:
            raise ContractViolation(f"theta={self.theta} is not a multiple of 1/{self.n_samples}")
        if self.mode not in ("adaptive", "all_checkpoints"):
            raise ContractViolation(f"unknown mode {self.mode!r}")
        if self.trigger not in ("deployment", "offline"):
            raise ContractViolation(f"unknown trigger {self.trigger!r}")
        if self.on_probe_error not in ("skip", "raise"):
            raise ContractViolation(f"unknown on_probe_error {self.on_probe_error!r}")

    def fires(self, psc: PscResult) -> bool:
        if psc.signal(self.trigger) < self.theta - 1e-12:
            return False
        return not (psc.tied and self.tie_fallback)


@dataclass(frozen=True)
class BaeeOutcome:
    problem_id: str
    strategy: str
    triggered: bool
    trigger_fraction: float | None
    answer: Answer
    correct: bool
    api_calls: int
    serial_tokens_used: int
    serial_tokens_full: int
    probe_tokens: int = 0
    probe_prompt_tokens: int = 0
    skipped: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.triggered and self.trigger_fraction is None:
            raise ContractViolation("triggered outcome needs a trigger fraction")
        if self.api_calls < 1:
            raise ContractViolation("api_calls must be >= 1")
        if self.serial_tokens_used > self.serial_tokens_full:
            raise ContractViolation("serial tokens used exceed the full rollout")

    @property
    def serial_reduction(self) -> float:
        return 1.0 - self.trigger_fraction if self.triggered else 0.0

    def to_record(self) -> dict[str, Any]:
        return {
            "problem_id": self.problem_id,
            "strategy": self.strategy,
            "triggered": self.triggered,
            "trigger_fraction": self.trigger_fraction,
            "answer": self.answer.normalized,
            "correct": self.correct,
            "api_calls": self.api_calls,
            "serial_tokens_used": self.serial_tokens_used,
            "serial_tokens_full": self.serial_tokens_full,
            "probe_tokens": self.probe_tokens,
            "probe_prompt_tokens": self.probe_prompt_tokens,
            "skipped": list(self.skipped),
        }

    @classmethod
    def from_record(cls, d: dict[str, Any]) -> "BaeeOutcome":
        return cls(
            problem_id=d["problem_id"],
            strategy=d["strategy"],
            triggered=d["triggered"],
            trigger_fraction=d["trigger_fraction"],
            answer=normalize_answer(d["answer"]),
            correct=d["correct"],
            api_calls=d["api_calls"],
            serial_tokens_used=d["serial_tokens_used"],
            serial_tokens_full=d["serial_tokens_full"],
            probe_tokens=d.get("probe_tokens", 0),
            probe_prompt_tokens=d.get("probe_prompt_tokens", 0),
            skipped=tuple(d.get("skipped", ())),
        )


@dataclass(frozen=True)
class ProblemResults:
    """Everything the offline simulators need about one problem."""

    problem_id: str
    ground_truth: str
    grid: CheckpointGrid
    psc: tuple[PscResult, ...]
    full_answer: Answer
    full_correct: bool
    rollout_length: int
    rollouts_correct: int = 1
    n_rollouts: int = 1
    efa: tuple[EfaResult, ...] = ()
    difficulty: int | None = None

    def __post_init__(self) -> None:
        if self.psc and len(self.psc) != len(self.grid):
            raise ContractViolation(f"{self.problem_id}: PSC grid incomplete")
        if self.efa and len(self.efa) != len(self.grid):
            raise ContractViolation(f"{self.problem_id}: EFA grid incomplete")

    @property
    def wrong(self) -> bool:
        """No sampled rollout was correct; proxy for an unsolvable problem."""
        return self.rollouts_correct == 0

    @property
    def solvable(self) -> bool:
        return self.rollouts_correct > 0


def _fallback(pid: str, strategy: str, answer: Answer, correct: bool, calls: int, T: int, **kw) -> BaeeOutcome:
    return BaeeOutcome(pid, strategy, False, None, answer, correct, calls, T, T, **kw)


def _exit(
    pid: str, strategy: str, f: float, answer: Answer, correct: bool, calls: int, T: int, **kw
) -> BaeeOutcome:
    return BaeeOutcome(pid, strategy, True, f, answer, correct, calls, prefix_length(T, f), T, **kw)


def run_baee_adaptive(
    backend: Backend,
    problem: ProblemRecord,
    rollout: Rollout,
    policy: BaeePolicy,
    *,
    grader: str = "exact",
) -> BaeeOutcome:
    """Walk the grid, probing with PSC; exit at the first checkpoint that fires.

    The rollout stands in for the main generation: its prefixes are what the
    live policy would have produced by each checkpoint.
    """
    T = rollout.length
    n = policy.n_samples
    visited = 0
    probe_tokens = probe_prompt = 0
    skipped: list[float] = []
    for f in policy.grid:
        visited += 1
        try:
            psc = run_psc(
                backend, problem, rollout.prefix(f), f, n=n, grader=grader, max_tokens=continuation_budget(T, f)
            )
        except ProbeError:
            if policy.on_probe_error == "raise":
                raise
            skipped.append(f)
            continue
        probe_tokens += psc.completion_tokens
        probe_prompt += psc.prompt_tokens
        if policy.fires(psc):
            return _exit(
                problem.id,
                "psc_adaptive",
                f,
                psc.majority,
                grade(psc.majority, problem.ground_truth, grader),
                visited * n + 1,
                T,
                probe_tokens=probe_tokens,
                probe_prompt_tokens=probe_prompt,
                skipped=tuple(skipped),
            )
    return _fallback(
        problem.id,
        "psc_adaptive",
        normalize_answer(rollout.answer),
        rollout.correct,
        visited * n + 1,
        T,
        probe_tokens=probe_tokens,
        probe_prompt_tokens=probe_prompt,
        skipped=tuple(skipped),
    )


def simulate(record: ProblemResults, policy: BaeePolicy, *, grader: str = "exact") -> BaeeOutcome:
    """Replay BAEE on a precomputed PSC grid (adaptive or all-checkpoint costs)."""
    if len(record.psc) != len(record.grid):
        raise ContractViolation(f"{record.problem_id}: incomplete PSC grid")
    n = policy.n_samples
    T = record.rollout_length
    adaptive = policy.mode == "adaptive"
    strategy = "psc_adaptive" if adaptive else "psc_all"
    total_probe = sum(p.completion_tokens for p in record.psc)
    total_prompt = sum(p.prompt_tokens for p in record.psc)
    probe = prompt = 0
    for j, psc in enumerate(record.psc):
        probe += psc.completion_tokens
        prompt += psc.prompt_tokens
        if policy.fires(psc):
            calls = (j + 1) * n + 1 if adaptive else len(record.grid) * n + 1
            return _exit(
                record.problem_id,
                strategy,
                psc.fraction,
                psc.majority,
                grade(psc.majority, record.ground_truth, grader),
                calls,
                T,
                probe_tokens=probe if adaptive else total_probe,
                probe_prompt_tokens=prompt if adaptive else total_prompt,
            )
    return _fallback(
        record.problem_id,
        strategy,
        record.full_answer,
        record.full_correct,
        len(record.grid) * n + 1,
        T,
        probe_tokens=total_probe,
        probe_prompt_tokens=total_prompt,
    )


@dataclass(frozen=True)
class BaeeRun:
    outcomes: tuple[BaeeOutcome, ...]
    accuracy: float
    mean_reduction: float


def summarize(outcomes: Sequence[BaeeOutcome]) -> BaeeRun:
    n = len(outcomes)
    if n == 0:
        return BaeeRun((), 0.0, 0.0)
    acc = sum(o.correct for o in outcomes) / n
    red = math.fsum(o.serial_reduction for o in outcomes) / n
    return BaeeRun(tuple(outcomes), acc, red)


def run_baee_all(records: Sequence[ProblemResults], policy: BaeePolicy, *, grader: str = "exact") -> BaeeRun:
    """Exit at the earliest firing checkpoint with every checkpoint probed."""
    from dataclasses import replace

    pol = replace(policy, mode="all_checkpoints")
    return summarize([simulate(r, pol, grader=grader) for r in records])


# -- EFA baselines --------------------------------------------------------------


def _efa_walk(
    strategy: str,
    problem: ProblemRecord,
    rollout: Rollout,
    grid: CheckpointGrid,
    accept,
    efa: Sequence[EfaResult] | None,
    backend: Backend | None,
    template: SuffixTemplate,
    grader: str,
) -> BaeeOutcome:
    T = rollout.length
    if efa is not None and len(efa) != len(grid):
        raise ContractViolation(f"{problem.id}: EFA results do not cover the grid")
    for j, f in enumerate(grid):
        if efa is not None:
            r = efa[j]
        elif backend is not None:
            r = run_efa(backend, problem, rollout.prefix(f), f, template, grader=grader)
        else:
            raise ContractViolation("pass precomputed EFA results or a backend")
        if accept(r):
            return _exit(problem.id, strategy, f, r.answer, r.correct, j + 2, T)
    return _fallback(problem.id, strategy, normalize_answer(rollout.answer), rollout.correct, len(grid) + 1, T)


def run_naive_efa(
    problem: ProblemRecord,
    rollout: Rollout,
    grid: CheckpointGrid = DEFAULT_GRID,
    *,
    efa: Sequence[EfaResult] | None = None,
    backend: Backend | None = None,
    template: SuffixTemplate = ORIGINAL,
    grader: str = "exact",
) -> BaeeOutcome:
    """Exit at the first checkpoint whose forced answer is non-empty."""
    return _efa_walk(
        "naive_efa", problem, rollout, grid, lambda r: r.answer.normalized != "", efa, backend, template, grader
    )


def run_efa_oracle(
    problem: ProblemRecord,
    rollout: Rollout,
    grid: CheckpointGrid = DEFAULT_GRID,
    *,
    efa: Sequence[EfaResult] | None = None,
    backend: Backend | None = None,
    template: SuffixTemplate = ORIGINAL,
    grader: str = "exact",
) -> BaeeOutcome:
    """Exit at the first checkpoint whose forced answer is correct (uses ground truth)."""
    return _efa_walk("efa_oracle", problem, rollout, grid, lambda r: r.correct, efa, backend, template, grader)


# -- prefix-free self-consistency baselines -----------------------------------


@dataclass(frozen=True)
class ScOutcome:
    problem_id: str
    variant: str
    answer: Answer | None
    correct: bool
    api_calls: int
    total_tokens: int

    @property
    def no_answer(self) -> bool:
        return self.answer is None


SC_VARIANTS = ("sc8_full", "sc8_budget", "single_budget")


def run_sc_baselines(
    backend: Backend,
    problem: ProblemRecord,
    variant: str,
    budget: int | None = None,
    *,
    n: int = 8,
    full_max_tokens: int = 32768,
    grader: str = "exact",
    temperature: float = 1.0,
) -> ScOutcome:
    """Cold-start generations (no prefix) with majority vote."""
    if variant == "sc8_full":
        count, cap = n, full_max_tokens
    elif variant == "sc8_budget":
        if budget is None:
            raise ContractViolation("sc8_budget needs a token budget")
        count, cap = n, budget // n
    elif variant == "single_budget":
        if budget is None:
            raise ContractViolation("single_budget needs a token budget")
        count, cap = 1, budget
    else:
        raise ContractViolation(f"unknown SC variant {variant!r}")
    if cap < 1:
        return ScOutcome(problem.id, variant, None, False, 0, 0)
    res = backend.sample(
        GenerationRequest(prompt=problem.prompt, temperature=temperature, max_tokens=cap, n_samples=count)
    )
    answers = [a for a in (extract_answer(t) for t in res.texts) if a.normalized]
    if not answers:
        return ScOutcome(problem.id, variant, None, False, 1, res.usage.completion_tokens)
    vote = majority_vote(answers)
    return ScOutcome(
        problem.id, variant, vote.winner, grade(vote.winner, problem.ground_truth, grader), 1,
        res.usage.completion_tokens,
    )


# -- cost accounting --------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    n_problems: int
    accuracy: float
    trigger_rate: float
    mean_serial_reduction: float
    token_ratio: float  # (serial used + probe completion tokens) / full, averaged
    token_ratio_with_prompt: float
    median_api_calls: float
    mean_api_calls: float
    trigger_rate_by_fraction: dict[float, float] = field(default_factory=dict)


def cost_report(outcomes: Sequence[BaeeOutcome]) -> CostReport:
    n = len(outcomes)
    if n == 0:
        raise ContractViolation("cost report needs at least one outcome")
    ratios = [(o.serial_tokens_used + o.probe_tokens) / o.serial_tokens_full for o in outcomes]
    ratios_p = [
        (o.serial_tokens_used + o.probe_tokens + o.probe_prompt_tokens) / o.serial_tokens_full for o in outcomes
    ]
    by_f: dict[float, int] = {}
    for o in outcomes:
        if o.triggered:
            by_f[o.trigger_fraction] = by_f.get(o.trigger_fraction, 0) + 1
    calls = [o.api_calls for o in outcomes]
    return CostReport(
        n_problems=n,
        accuracy=sum(o.correct for o in outcomes) / n,
        trigger_rate=sum(o.triggered for o in outcomes) / n,
        mean_serial_reduction=math.fsum(o.serial_reduction for o in outcomes) / n,
        token_ratio=math.fsum(ratios) / n,
        token_ratio_with_prompt=math.fsum(ratios_p) / n,
        median_api_calls=float(statistics.median(calls)),
        mean_api_calls=math.fsum(calls) / n,
        trigger_rate_by_fraction={f: c / n for f, c in sorted(by_f.items())},
    )


STRATEGY_HEADER = ("strategy", "gt", "calls", "accuracy", "reduction", "model")
_USES_GT = {"full_cot": "-", "naive_efa": "no", "efa_oracle": "yes", "psc_all": "no", "psc_adaptive": "no"}


def strategy_rows(model: str, runs: dict[str, Sequence[BaeeOutcome]], full_accuracy: float) -> list[tuple]:
    """One row per strategy (strategy, gt, calls, accuracy, reduction, model); calls is the median API call count."""
    rows: list[tuple] = [("full_cot", "-", 1, full_accuracy, None, model)]
    for name, outs in runs.items():
        rep = cost_report(outs)
        rows.append((name, _USES_GT.get(name, "no"), rep.median_api_calls, rep.accuracy, rep.mean_serial_reduction, model))
    return rows


# -- recoverability guarantee -----------------------------------------------------


@dataclass(frozen=True)
class Guarantee:
    p_k_floor: float
    confidence_hoeffding: float
    confidence_exact: float
    confidence_exact_strict: float

    @property
    def confidence(self) -> float:
        return self.confidence_hoeffding


def guarantee(n: int, theta: float, epsilon: float) -> Guarantee:
    """Lower bound on true recoverability when PSC_n >= theta fires.

    Returns the Hoeffding confidence 1 - 2exp(-2 n eps^2) together with the
    worst-case exact binomial confidence under both ">=" and ">" deviation
    readings.
    """
    if not 0.0 < epsilon < theta:
        raise ContractViolation("need 0 < epsilon < theta")
    return Guarantee(
        p_k_floor=theta - epsilon,
        confidence_hoeffding=1.0 - hoeffding_bound(n, epsilon),
        confidence_exact=1.0 - worst_case_tail(n, epsilon, strict=False),
        confidence_exact_strict=1.0 - worst_case_tail(n, epsilon, strict=True),
    )


def outcomes_from(records: Iterable[ProblemResults], policy: BaeePolicy, grader: str = "exact") -> list[BaeeOutcome]:
    return [simulate(r, policy, grader=grader) for r in records]
