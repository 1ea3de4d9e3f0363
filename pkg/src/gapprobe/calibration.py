"""Threshold calibration on a held-out split, resplit stability, and sweeps."""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baee import BaeePolicy, ProblemResults, simulate
from .core import DEFAULT_GRID, ContractViolation
from .stats import derive_seed

DEFAULT_THETAS = (0.500, 0.625, 0.750, 0.875, 1.000)


@dataclass(frozen=True)
class CalibrationConfig:
    theta_grid: tuple[float, ...] = DEFAULT_THETAS
    split: str = "first_half"  # first_half | random
    split_seed: int = 0
    fp_limit: float = 0.05
    n_resplits: int = 100
    trigger: str = "offline"
    n_samples: int = 8
    tie_fallback: bool = True
    master_seed: int = 0
    grader: str = "exact"

    def __post_init__(self) -> None:
        grid = tuple(float(t) for t in self.theta_grid)
        object.__setattr__(self, "theta_grid", grid)
        if not grid or list(grid) != sorted(grid):
            raise ContractViolation("theta_grid must be nonempty and sorted ascending")
        for t in grid:
            m = t * self.n_samples
            if abs(m - round(m)) > 1e-9:
                raise ContractViolation(f"theta {t} is not a multiple of 1/{self.n_samples}")
        if self.split not in ("first_half", "random"):
            raise ContractViolation(f"unknown split {self.split!r}")

    def policy(self, theta: float, records: Sequence[ProblemResults]) -> BaeePolicy:
        grid = records[0].grid if records else DEFAULT_GRID
        return BaeePolicy(
            grid=grid,
            theta=theta,
            n_samples=self.n_samples,
            mode="adaptive",
            tie_fallback=self.tie_fallback,
            trigger=self.trigger,
        )


@dataclass(frozen=True)
class ThetaEval:
    theta: float
    accuracy: float
    baseline_accuracy: float
    mean_reduction: float
    fp_count: int
    n_wrong: int
    accuracy_ok: bool
    fp_ok: bool

    @property
    def fp_rate(self) -> float:
        return self.fp_count / self.n_wrong if self.n_wrong else 0.0

    @property
    def fp_vacuous(self) -> bool:
        return self.n_wrong == 0

    @property
    def feasible(self) -> bool:
        return self.accuracy_ok and self.fp_ok


def evaluate_theta(records: Sequence[ProblemResults], theta: float, config: CalibrationConfig) -> ThetaEval:
    if not records:
        raise ContractViolation("cannot evaluate a threshold on an empty split")
    pol = config.policy(theta, records)
    outs = [simulate(r, pol, grader=config.grader) for r in records]
    n = len(records)
    acc = sum(o.correct for o in outs) / n
    base = sum(r.full_correct for r in records) / n
    red = math.fsum(o.serial_reduction for o in outs) / n
    wrong = [(r, o) for r, o in zip(records, outs) if r.wrong]
    fp = sum(o.triggered for _, o in wrong)
    n_wrong = len(wrong)
    fp_ok = n_wrong == 0 or fp / n_wrong <= config.fp_limit + 1e-12
    return ThetaEval(theta, acc, base, red, fp, n_wrong, acc >= base - 1e-12, fp_ok)


def threshold_sweep(
    records: Sequence[ProblemResults], theta_grid: Sequence[float], config: CalibrationConfig | None = None
) -> list[ThetaEval]:
    """Accuracy / savings / proxy-FP frontier over the given thresholds."""
    cfg = config or CalibrationConfig(theta_grid=tuple(sorted(theta_grid)))
    return [evaluate_theta(records, t, cfg) for t in theta_grid]


SWEEP_HEADER = ("theta", "accuracy", "mean_savings", "proxy_fp_rate", "fp_count", "n_wrong")


def sweep_rows(evals: Sequence[ThetaEval]) -> list[tuple]:
    return [(e.theta, e.accuracy, e.mean_reduction, e.fp_rate, e.fp_count, e.n_wrong) for e in evals]


@dataclass(frozen=True)
class CalibrationReport:
    theta_star: float | None
    calib_accuracy: float
    calib_baseline: float
    test_accuracy: float
    test_baseline: float
    test_reduction: float
    proxy_fp_rate: float
    constraint_trace: tuple[ThetaEval, ...]
    fp_vacuous: bool
    calib_ids: tuple[str, ...] = field(repr=False, default=())
    test_ids: tuple[str, ...] = field(repr=False, default=())

    @property
    def feasible(self) -> bool:
        return self.theta_star is not None

    @property
    def label(self) -> str:
        return "none feasible" if self.theta_star is None else f"{self.theta_star:.3f}"

    @property
    def delta_accuracy(self) -> float:
        return self.test_accuracy - self.test_baseline


def split_records(
    records: Sequence[ProblemResults], how: str = "first_half", seed: int = 0
) -> tuple[list[ProblemResults], list[ProblemResults]]:
    """Calibration/test halves: dataset order, or a seeded shuffle."""
    n = len(records)
    if how == "first_half":
        order = list(range(n))
    elif how == "random":
        order = list(np.random.default_rng(seed).permutation(n))
    else:
        raise ContractViolation(f"unknown split {how!r}")
    half = n // 2
    return [records[i] for i in order[:half]], [records[i] for i in order[half:]]


def calibrate(
    records: Sequence[ProblemResults],
    config: CalibrationConfig = CalibrationConfig(),
    *,
    split_seed: int | None = None,
) -> CalibrationReport:
    """Pick the smallest threshold meeting the accuracy and proxy-FP constraints."""
    calib, test = split_records(records, config.split, config.split_seed if split_seed is None else split_seed)
    if not calib or not test:
        raise ContractViolation("need at least two problems to split")
    trace = tuple(evaluate_theta(calib, t, config) for t in config.theta_grid)
    chosen = next((e for e in trace if e.feasible), None)
    vacuous = trace[0].fp_vacuous
    ids_c = tuple(r.problem_id for r in calib)
    ids_t = tuple(r.problem_id for r in test)
    base_test = sum(r.full_correct for r in test) / len(test)
    if chosen is None:
        return CalibrationReport(None, 0.0, trace[0].baseline_accuracy, 0.0, base_test, 0.0, 0.0, trace, vacuous, ids_c, ids_t)
    held = evaluate_theta(test, chosen.theta, config)
    return CalibrationReport(
        theta_star=chosen.theta,
        calib_accuracy=chosen.accuracy,
        calib_baseline=chosen.baseline_accuracy,
        test_accuracy=held.accuracy,
        test_baseline=held.baseline_accuracy,
        test_reduction=held.mean_reduction,
        proxy_fp_rate=chosen.fp_rate,
        constraint_trace=trace,
        fp_vacuous=vacuous,
        calib_ids=ids_c,
        test_ids=ids_t,
    )


CALIBRATION_HEADER = (
    "model", "theta_star", "delta_acc", "test_accuracy", "test_baseline", "test_reduction", "proxy_fp_rate", "fp_vacuous",
)


def calibration_row(model: str, rep: CalibrationReport) -> tuple:
    return (
        model,
        rep.label,
        rep.delta_accuracy if rep.feasible else None,
        rep.test_accuracy if rep.feasible else None,
        rep.test_baseline,
        rep.test_reduction if rep.feasible else None,
        rep.proxy_fp_rate if rep.feasible else None,
        rep.fp_vacuous,
    )


TRACE_HEADER = ("theta", "accuracy", "baseline_accuracy", "mean_reduction", "fp_count", "n_wrong", "accuracy_ok", "fp_ok")


def trace_rows(rep: CalibrationReport) -> list[tuple]:
    return [
        (e.theta, e.accuracy, e.baseline_accuracy, e.mean_reduction, e.fp_count, e.n_wrong, e.accuracy_ok, e.fp_ok)
        for e in rep.constraint_trace
    ]


@dataclass(frozen=True)
class StabilityReport:
    modal_theta: float | None
    frequency: int
    n_resplits: int
    counts: dict[float | None, int]
    test_accuracy_mean: float
    test_accuracy_std: float
    test_reduction_mean: float
    test_reduction_std: float
    reports: tuple[CalibrationReport, ...] = field(repr=False, default=())


def _mode_conservative(counts: Counter) -> tuple[float | None, int]:
    # frequency ties go to the larger threshold; "none feasible" ranks lowest
    best = max(counts.items(), key=lambda kv: (kv[1], -1.0 if kv[0] is None else kv[0]))
    return best


def stability_bootstrap(
    records: Sequence[ProblemResults], config: CalibrationConfig = CalibrationConfig()
) -> StabilityReport:
    """Repeat calibration over seeded random 50/50 resplits."""
    if config.n_resplits < 2:
        raise ContractViolation("n_resplits must be >= 2")
    from dataclasses import replace

    cfg = replace(config, split="random")
    reports = tuple(
        calibrate(records, cfg, split_seed=derive_seed(config.master_seed, "resplit", i))
        for i in range(config.n_resplits)
    )
    counts = Counter(r.theta_star for r in reports)
    modal, freq = _mode_conservative(counts)
    feas = [r for r in reports if r.feasible]
    accs = [r.test_accuracy for r in feas]
    reds = [r.test_reduction for r in feas]

    def mean_std(xs: list[float]) -> tuple[float, float]:
        if not xs:
            return 0.0, 0.0
        return statistics.fmean(xs), statistics.stdev(xs) if len(xs) > 1 else 0.0

    am, asd = mean_std(accs)
    rm, rsd = mean_std(reds)
    return StabilityReport(modal, freq, config.n_resplits, dict(counts), am, asd, rm, rsd, reports)


STABILITY_HEADER = ("model", "modal_theta", "frequency", "n_resplits", "test_acc_mean", "test_acc_std", "test_red_mean", "test_red_std")


def stability_row(model: str, rep: StabilityReport) -> tuple:
    return (
        model,
        "none feasible" if rep.modal_theta is None else f"{rep.modal_theta:.3f}",
        rep.frequency,
        rep.n_resplits,
        rep.test_accuracy_mean,
        rep.test_accuracy_std,
        rep.test_reduction_mean,
        rep.test_reduction_std,
    )
