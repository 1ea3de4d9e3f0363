"""Trajectories, commitment fraction, detection-extraction gap and TV bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .core import CheckpointGrid, ContractViolation, prefix_length
from .probes import EfaResult, PscResult


class IncompleteDataError(ValueError):
    def __init__(self, missing: Sequence[tuple[str, float]]):
        self.missing = list(missing)
        shown = ", ".join(f"({p}, {f})" for p, f in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" and {len(self.missing) - 10} more"
        super().__init__(f"missing probe data for {shown}{more}")


@dataclass(frozen=True)
class PscTrajectory:
    problem_id: str
    grid: CheckpointGrid
    values: tuple[float, ...]
    solvable: bool = True
    rollout_length: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.grid):
            raise ContractViolation(f"{self.problem_id}: {len(self.values)} values for a {len(self.grid)}-point grid")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ContractViolation(f"{self.problem_id}: PSC values must lie in [0, 1]")

    @classmethod
    def from_results(
        cls,
        problem_id: str,
        grid: CheckpointGrid,
        results: Sequence[PscResult],
        *,
        mode: str = "offline",
        solvable: bool = True,
        rollout_length: int | None = None,
    ) -> "PscTrajectory":
        by_f = {round(r.fraction, 9): r for r in results}
        missing = [(problem_id, f) for f in grid if round(f, 9) not in by_f]
        if missing:
            raise IncompleteDataError(missing)
        return cls(
            problem_id,
            grid,
            tuple(by_f[round(f, 9)].signal(mode) for f in grid),
            solvable,
            rollout_length,
        )


def commitment_fraction(traj: PscTrajectory, theta: float, *, sustained: bool = False) -> float | None:
    """Earliest grid fraction where PSC >= theta, or None.

    ``sustained=True`` additionally requires every later checkpoint to stay at
    or above theta (an optional stricter reading, off by default).
    """
    if not 0.0 < theta <= 1.0:
        raise ContractViolation(f"theta must lie in (0, 1], got {theta}")
    for i, (f, v) in enumerate(zip(traj.grid, traj.values)):
        if v >= theta:
            if sustained and any(w < theta for w in traj.values[i:]):
                continue
            return f
    return None


def post_commitment_fraction(commit: float | None) -> float | None:
    return None if commit is None else 1.0 - commit


@dataclass(frozen=True)
class GapProfile:
    grid: CheckpointGrid
    psc_rate: tuple[float, ...]
    efa_acc: tuple[float, ...]
    gap: tuple[float, ...]

    def rows(self) -> list[tuple[float, float, float, float]]:
        return list(zip(self.grid, self.psc_rate, self.efa_acc, self.gap))


def gap_profile(
    trajectories: Sequence[PscTrajectory],
    efa_results: Mapping[str, Mapping[float, EfaResult]] | Mapping[str, Sequence[EfaResult]],
    theta: float,
) -> GapProfile:
    """Per-fraction PSC trigger rate, EFA accuracy and their difference."""
    if not trajectories:
        raise ContractViolation("gap profile needs at least one trajectory")
    grid = trajectories[0].grid
    efa: dict[str, dict[float, EfaResult]] = {}
    for pid, res in efa_results.items():
        items = res.values() if isinstance(res, Mapping) else res
        efa[pid] = {round(r.fraction, 9): r for r in items}
    missing = [
        (t.problem_id, f) for t in trajectories for f in grid if round(f, 9) not in efa.get(t.problem_id, {})
    ]
    if missing:
        raise IncompleteDataError(missing)
    n = len(trajectories)
    psc_rate, efa_acc = [], []
    for i, f in enumerate(grid):
        psc_rate.append(sum(t.values[i] >= theta for t in trajectories) / n)
        efa_acc.append(sum(efa[t.problem_id][round(f, 9)].correct for t in trajectories) / n)
    return GapProfile(grid, tuple(psc_rate), tuple(efa_acc), tuple(p - e for p, e in zip(psc_rate, efa_acc)))


def signed_gap(psc_value: float, efa_value: float) -> float:
    return psc_value - efa_value


def tv_lower_bound(psc_value: float, efa_value: float) -> float:
    """|PSC - EFA| lower-bounds the TV distance between free and forced continuations.

    TV is a supremum over events, and {a*} and its complement give the same
    absolute difference, so the bound holds for either sign of the gap.
    """
    for v in (psc_value, efa_value):
        if not 0.0 <= v <= 1.0:
            raise ContractViolation(f"probabilities must lie in [0, 1], got {v}")
    return abs(psc_value - efa_value)


def tv_bound_table(
    pairs: Mapping[str, Mapping[float, tuple[float, float]]],
) -> list[tuple[str, float, float, float, float, float]]:
    """Rows of (configuration, fraction, psc, efa, signed gap, bound)."""
    rows = []
    for config, by_f in pairs.items():
        for f in sorted(by_f):
            psc, efa = by_f[f]
            rows.append((config, f, psc, efa, signed_gap(psc, efa), tv_lower_bound(psc, efa)))
    return rows


TV_TABLE_HEADER = ("configuration", "fraction", "psc", "efa", "signed_gap", "tv_lower_bound")


def suffix_gap_ranking(fixtures: Mapping[str, Sequence[tuple[float, float]]]) -> list[tuple[str, float]]:
    """Templates ordered by mean (psc - efa) gap, smallest first."""
    means = {
        tid: math.fsum(signed_gap(p, e) for p, e in pairs) / len(pairs) for tid, pairs in fixtures.items() if pairs
    }
    return sorted(means.items(), key=lambda kv: (kv[1], kv[0]))


@dataclass(frozen=True)
class CommitmentRow:
    problem_id: str
    commit_fraction: float
    post_commit_fraction: float
    rollout_length: int
    post_commit_tokens: int


@dataclass(frozen=True)
class CommitmentMap:
    rows: tuple[CommitmentRow, ...]
    uncommitted: tuple[str, ...]
    aggregate_post_commit_share: float

    @property
    def empty(self) -> bool:
        return not self.rows

    def csv_rows(self) -> list[tuple]:
        if self.empty:
            return [("<none>", None, None, 0, 0)]
        return [
            (r.problem_id, r.commit_fraction, r.post_commit_fraction, r.rollout_length, r.post_commit_tokens)
            for r in self.rows
        ]


COMMITMENT_MAP_HEADER = ("problem_id", "commit_fraction", "post_commit_fraction", "rollout_length", "post_commit_tokens")


def export_commitment_map(
    trajectories: Sequence[PscTrajectory],
    theta: float,
    rollout_lengths: Mapping[str, int] | None = None,
    *,
    sustained: bool = False,
) -> CommitmentMap:
    """Per-problem commitment rows over solvable problems, plus a token-weighted share."""
    rows, uncommitted = [], []
    for t in trajectories:
        if not t.solvable:
            continue
        c = commitment_fraction(t, theta, sustained=sustained)
        if c is None:
            uncommitted.append(t.problem_id)
            continue
        T = (rollout_lengths or {}).get(t.problem_id, t.rollout_length)
        if T is None:
            raise ContractViolation(f"no rollout length for {t.problem_id}")
        rows.append(CommitmentRow(t.problem_id, c, 1.0 - c, T, T - prefix_length(T, c)))
    rows.sort(key=lambda r: (r.commit_fraction, r.problem_id))
    total = sum(r.rollout_length for r in rows)
    share = sum(r.post_commit_tokens for r in rows) / total if total else 0.0
    return CommitmentMap(tuple(rows), tuple(sorted(uncommitted)), share)
