"""Resampling tests, multiplicity correction and concentration oracles."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .core import ContractViolation


def derive_seed(master: int, *labels: object) -> int:
    """Deterministic child seed for a call site, e.g. (master, "resplit", 7)."""
    h = hashlib.blake2b(repr((master, labels)).encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") >> 1


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    ci_low: float
    ci_high: float
    n_resamples: int
    level: float


def bootstrap_ci(
    samples: Sequence[float],
    statistic: Callable[..., float] = np.mean,
    n_resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile bootstrap interval.

    The interval is widened to include the point estimate when the percentile
    endpoints fall to one side of it, so ``ci_low <= point <= ci_high`` always.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise ContractViolation("bootstrap needs at least one sample")
    rng = np.random.default_rng(seed)
    point = float(statistic(x))
    stats = np.empty(n_resamples)
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, n_resamples, chunk):
        m = min(chunk, n_resamples - start)
        idx = rng.integers(0, x.size, size=(m, x.size))
        try:
            stats[start : start + m] = statistic(x[idx], axis=1)
        except TypeError:
            stats[start : start + m] = [statistic(row) for row in x[idx]]
    alpha = (1.0 - level) / 2
    lo, hi = np.quantile(stats, [alpha, 1 - alpha])
    return BootstrapResult(point, float(min(lo, point)), float(max(hi, point)), n_resamples, level)


@dataclass(frozen=True)
class PermutationResult:
    statistic: float
    p_value: float
    n_permutations: int
    paired: bool
    exact: bool = False


_TIE_EPS = 1e-12


def permutation_test(
    group_a: Sequence[float],
    group_b: Sequence[float],
    n_perms: int = 100_000,
    seed: int = 0,
) -> PermutationResult:
    """Two-sided test on the difference of means, add-one smoothed."""
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ContractViolation("both groups must be nonempty")
    pooled = np.concatenate([a, b])
    n_a, n = a.size, pooled.size
    obs = a.mean() - b.mean()
    rng = np.random.default_rng(seed)
    total = pooled.sum()
    hits = 0
    chunk = max(1, 4_000_000 // n)
    for start in range(0, n_perms, chunk):
        m = min(chunk, n_perms - start)
        keys = rng.random((m, n))
        perm = np.argsort(keys, axis=1)[:, :n_a]
        sum_a = pooled[perm].sum(axis=1)
        diff = sum_a / n_a - (total - sum_a) / (n - n_a)
        hits += int(np.count_nonzero(np.abs(diff) >= abs(obs) - _TIE_EPS))
    return PermutationResult(float(obs), (1 + hits) / (n_perms + 1), n_perms, paired=False)


def paired_signflip_test(
    differences: Sequence[float],
    n_perms: int = 100_000,
    seed: int = 0,
    exact: bool = False,
) -> PermutationResult:
    """Sign-flip test on the mean paired difference.

    ``exact=True`` enumerates all 2^n sign patterns (n <= 20) and returns the
    exact two-sided p-value instead of a Monte Carlo estimate.
    """
    d = np.asarray(differences, dtype=float)
    if d.size == 0:
        raise ContractViolation("differences must be nonempty")
    obs = float(d.mean())
    if exact:
        if d.size > 20:
            raise ContractViolation("exact sign-flip enumeration is limited to n <= 20")
        n = d.size
        total = 1 << n
        hits = 0
        codes = np.arange(total, dtype=np.int64)
        for start in range(0, total, 1 << 16):
            c = codes[start : start + (1 << 16)]
            signs = 1 - 2 * ((c[:, None] >> np.arange(n)) & 1)
            means = (signs * d).mean(axis=1)
            hits += int(np.count_nonzero(np.abs(means) >= abs(obs) - _TIE_EPS))
        return PermutationResult(obs, hits / total, total, paired=True, exact=True)
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, 4_000_000 // d.size)
    for start in range(0, n_perms, chunk):
        m = min(chunk, n_perms - start)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(m, d.size))
        means = (signs * d).mean(axis=1)
        hits += int(np.count_nonzero(np.abs(means) >= abs(obs) - _TIE_EPS))
    return PermutationResult(obs, (1 + hits) / (n_perms + 1), n_perms, paired=True)


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float
    p_value: float
    method: str  # "exact" | "normal"


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mann_whitney_u(group_a: Sequence[float], group_b: Sequence[float]) -> MannWhitneyResult:
    """U for group_a (pairs a > b, ties count one half) with a two-sided p-value.

    Combined sizes below 12 use exact enumeration over all rank assignments;
    larger samples use the tie-corrected normal approximation with continuity
    correction.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ContractViolation("both groups must be nonempty")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    mu = n1 * n2 / 2
    n = n1 + n2
    if n < 12:
        dev = abs(u - mu)
        hits = total = 0
        for combo in itertools.combinations(range(n), n1):
            uc = ranks[list(combo)].sum() - n1 * (n1 + 1) / 2
            total += 1
            if abs(uc - mu) >= dev - _TIE_EPS:
                hits += 1
        return MannWhitneyResult(u, hits / total, "exact")
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float((counts**3 - counts).sum())
    var = n1 * n2 / 12 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return MannWhitneyResult(u, 1.0, "normal")
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2))
    return MannWhitneyResult(u, min(1.0, p), "normal")


def holm_bonferroni(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, returned in the input order."""
    m = len(p_values)
    if any(not 0.0 <= p <= 1.0 for p in p_values):
        raise ContractViolation("p-values must lie in [0, 1]")
    order = sorted(range(m), key=lambda i: p_values[i])
    adjusted = [0.0] * m
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (m - rank) * p_values[i]))
        adjusted[i] = running
    return adjusted


@dataclass(frozen=True)
class BinomialTail:
    probability: float
    hoeffding: float


def hoeffding_bound(n: int, epsilon: float) -> float:
    """Two-sided Hoeffding bound 2 exp(-2 n eps^2) (not clamped to 1)."""
    return 2.0 * math.exp(-2.0 * n * epsilon * epsilon)


def binomial_tail(n: int, p: float, epsilon: float, strict: bool = False, exact: bool = False) -> BinomialTail:
    """P(|X/n - p| >= eps) for X ~ Binomial(n, p); ``strict`` uses > instead.

    Deviations within 1e-9 of eps are re-decided in rational arithmetic, so
    boundary cases (e.g. 6/8 - 1/2 == 1/4) are never lost to rounding.  With
    ``exact=True`` the probability sum is rational too and rounded once.
    """
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ContractViolation("p must lie in [0, 1]")
    if epsilon <= 0:
        raise ContractViolation("epsilon must be positive")
    pf, ef = Fraction(p), Fraction(epsilon)

    def deviates(x: int) -> bool:
        d = abs(x / n - p)
        if abs(d - epsilon) > 1e-9:
            return d > epsilon
        d_exact = abs(Fraction(x, n) - pf)
        return d_exact > ef if strict else d_exact >= ef

    hits = [x for x in range(n + 1) if deviates(x)]
    if exact:
        prob = float(sum(math.comb(n, x) * pf**x * (1 - pf) ** (n - x) for x in hits))
    else:
        prob = math.fsum(math.comb(n, x) * p**x * (1 - p) ** (n - x) for x in hits)
    return BinomialTail(prob, hoeffding_bound(n, epsilon))


def worst_case_tail(n: int, epsilon: float, strict: bool = False, grid: int = 1000) -> float:
    """sup over p of the exact two-sided tail, on an even p-grid that includes 1/2."""
    return max(binomial_tail(n, i / grid, epsilon, strict).probability for i in range(grid + 1))


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y) or len(x) < 2:
        raise ContractViolation("spearman needs two equal-length sequences of length >= 2")
    rx = _midranks(np.asarray(x, dtype=float))
    ry = _midranks(np.asarray(y, dtype=float))
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx**2).sum() * (ry**2).sum()))
    if denom == 0:
        return float("nan")
    return float((rx * ry).sum() / denom)
