"""Trajectory features and rule-based false-positive filters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .baee import BaeeOutcome
from .commitment import PscTrajectory
from .core import CheckpointGrid, ContractViolation, DEFAULT_GRID

EARLY_AGREEMENT_MIN = 0.50
MAX_DROPS = 2
VARIANCE_LIMIT = 0.06
VOLATILE_DROPS = 3
LATE_PEAK_AT = 0.50


@dataclass(frozen=True)
class TrajectoryFeatures:
    problem_id: str
    psc_at_first: float
    mean_psc: float
    max_psc: float
    spread: float
    num_drops: int
    argmax_fraction: float
    cot_length: int
    late_peak: bool
    variance: float


def extract_features(traj: PscTrajectory, rollout_length: int) -> TrajectoryFeatures:
    v = np.asarray(traj.values, dtype=float)
    if v.size == 0:
        raise ContractViolation("empty trajectory")
    # argmax returns the earliest index on ties
    i_max = int(np.argmax(v))
    drops = int(np.count_nonzero(v[1:] < v[:-1]))
    f_max = traj.grid.fractions[i_max]
    return TrajectoryFeatures(
        problem_id=traj.problem_id,
        psc_at_first=float(v[0]),
        mean_psc=float(v.mean()),
        max_psc=float(v.max()),
        spread=float(v.max() - v.min()),
        num_drops=drops,
        argmax_fraction=f_max,
        cot_length=int(rollout_length),
        late_peak=f_max >= LATE_PEAK_AT,
        variance=float(v.var()),
    )


def filter_early_agreement(feat: TrajectoryFeatures) -> bool:
    """Pass iff the first checkpoint already agrees at >= 0.50."""
    return feat.psc_at_first >= EARLY_AGREEMENT_MIN


def filter_monotonicity(feat: TrajectoryFeatures) -> bool:
    return feat.num_drops <= MAX_DROPS


def filter_variance_nonmonotone(feat: TrajectoryFeatures) -> bool:
    """True means flagged: high variance and repeated drops together."""
    return feat.variance > VARIANCE_LIMIT and feat.num_drops >= VOLATILE_DROPS


EARLY_EXIT = "early_exit"
FULL_COT_FALLBACK = "full_cot_fallback"


def two_stage_protocol(outcome: BaeeOutcome, feat: TrajectoryFeatures) -> str:
    if not outcome.triggered:
        raise ContractViolation(f"{outcome.problem_id}: two-stage protocol applies only to triggered outcomes")
    return FULL_COT_FALLBACK if filter_variance_nonmonotone(feat) else EARLY_EXIT


@dataclass(frozen=True)
class FilterRates:
    """Share of each class removed by a filter."""

    name: str
    fp_removed: float
    tp_removed: float

    @property
    def tp_retained(self) -> float:
        return 1.0 - self.tp_removed


FILTERS = {
    "early_agreement": lambda f: not filter_early_agreement(f),
    "monotonicity": lambda f: not filter_monotonicity(f),
    "variance_nonmonotone": filter_variance_nonmonotone,
}


def filter_rates(tp: Sequence[TrajectoryFeatures], fp: Sequence[TrajectoryFeatures]) -> list[FilterRates]:
    if not tp or not fp:
        raise ContractViolation("need both TP and FP examples")
    out = []
    for name, removes in FILTERS.items():
        out.append(
            FilterRates(name, sum(map(removes, fp)) / len(fp), sum(map(removes, tp)) / len(tp))
        )
    return out


FEATURE_HEADER = (
    "problem_id", "label", "psc_at_first", "mean_psc", "max_psc", "spread", "num_drops",
    "argmax_fraction", "cot_length", "late_peak", "variance",
)


def feature_rows(labeled: Sequence[tuple[str, TrajectoryFeatures]]) -> list[tuple]:
    return [
        (f.problem_id, lab, f.psc_at_first, f.mean_psc, f.max_psc, f.spread, f.num_drops,
         f.argmax_fraction, f.cot_length, f.late_peak, f.variance)
        for lab, f in labeled
    ]


SUMMARY_HEADER = ("feature", "tp_mean", "fp_mean")


def feature_summary(tp: Sequence[TrajectoryFeatures], fp: Sequence[TrajectoryFeatures]) -> list[tuple]:
    """Class means per feature, one row each (late_peak as a share)."""
    names = ("psc_at_first", "mean_psc", "max_psc", "spread", "num_drops", "argmax_fraction", "cot_length", "late_peak")

    def mean(xs: Sequence[TrajectoryFeatures], k: str) -> float | None:
        return float(np.mean([float(getattr(x, k)) for x in xs])) if xs else None

    return [(k, mean(tp, k), mean(fp, k)) for k in names]


AUDIT_HEADER = ("problem_id", "early_agreement", "monotonicity", "variance_flag", "decision")


def audit_row(outcome: BaeeOutcome, feat: TrajectoryFeatures) -> tuple:
    decision = two_stage_protocol(outcome, feat) if outcome.triggered else "not_triggered"
    return (
        outcome.problem_id,
        "pass" if filter_early_agreement(feat) else "fail",
        "pass" if filter_monotonicity(feat) else "fail",
        "flagged" if filter_variance_nonmonotone(feat) else "clear",
        decision,
    )


# -- labeled fixture populations -------------------------------------------------


@dataclass(frozen=True)
class ClassProfile:
    """Marginal rates used to sample synthetic trajectories for one class."""

    p_early_high: float
    p_volatile: float
    mean_length: float


TP_PROFILE = ClassProfile(p_early_high=0.892, p_volatile=0.096, mean_length=1882)
FP_PROFILE = ClassProfile(p_early_high=0.258, p_volatile=0.545, mean_length=4394)


def _eighths(rng: np.random.Generator, lo: int, hi: int) -> float:
    return int(rng.integers(lo, hi + 1)) / 8


def _volatile(rng: np.random.Generator, first: float, m: int) -> list[float]:
    # alternate between low and high bands: >= 4 drops, amplitude >= 5/8
    hi_first = first >= 0.5
    out = [first]
    for i in range(1, m):
        high = (i % 2 == 0) == hi_first
        out.append(_eighths(rng, 7, 8) if high else _eighths(rng, 0, 2))
    return out


def _smooth(rng: np.random.Generator, first: float, m: int) -> list[float]:
    # non-decreasing ramp toward 1 with at most two one-step dips
    out = [first]
    for _ in range(1, m):
        out.append(min(1.0, out[-1] + _eighths(rng, 0, 2)))
    for i in rng.choice(np.arange(1, m), size=int(rng.integers(0, 3)), replace=False):
        out[int(i)] = max(0.0, out[int(i)] - 0.125)
    return out


def sample_trajectory(
    rng: np.random.Generator, profile: ClassProfile, problem_id: str, grid: CheckpointGrid = DEFAULT_GRID
) -> tuple[PscTrajectory, int]:
    m = len(grid)
    first = _eighths(rng, 4, 8) if rng.random() < profile.p_early_high else _eighths(rng, 0, 3)
    values = _volatile(rng, first, m) if rng.random() < profile.p_volatile else _smooth(rng, first, m)
    length = max(16, int(rng.exponential(profile.mean_length)))
    return PscTrajectory(problem_id, grid, tuple(values)), length


def fixture_population(
    n_tp: int = 1000, n_fp: int = 60, seed: int = 0, grid: CheckpointGrid = DEFAULT_GRID
) -> tuple[list[TrajectoryFeatures], list[TrajectoryFeatures]]:
    """Labeled (TP, FP) feature sets sampled from the two class profiles."""
    rng = np.random.default_rng(seed)
    tp = [extract_features(*sample_trajectory(rng, TP_PROFILE, f"tp-{i:04d}", grid)) for i in range(n_tp)]
    fp = [extract_features(*sample_trajectory(rng, FP_PROFILE, f"fp-{i:04d}", grid)) for i in range(n_fp)]
    return tp, fp
