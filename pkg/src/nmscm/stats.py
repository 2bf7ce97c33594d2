"""Nonparametric tests for paired model comparisons.

Conventions are fixed explicitly because they change p-values:

* Wilcoxon signed-rank drops zero differences, uses average ranks for ties,
  computes the exact null distribution for ``n <= 20`` and a tie- and
  continuity-corrected normal approximation above that.
* Two-sided p-values are ``min(1, 2 * smaller tail)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

EXACT_MAX_N = 20
_P_FLOOR = np.finfo(float).tiny


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_two_sided: float
    method: str  # "exact" | "normal_approx"

    __test__ = False  # keep pytest from collecting this class


class SpearmanResult(NamedTuple):
    rho: float
    p: float


def signed_rank_stat(diffs: Sequence[float]) -> tuple[float, np.ndarray]:
    """Return (W+, ranks of |d|) after dropping zeros."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), ranks


def _exact_signed_rank_cdf(ranks: np.ndarray) -> tuple[np.ndarray, int]:
    # Doubled ranks are integers even with average-rank ties, so the null
    # distribution over all 2^n sign assignments is a subset-sum count.
    doubled = np.rint(2 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=float)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts, total


def wilcoxon_signed_rank(diffs: Sequence[float]) -> TestResult:
    d = np.asarray(diffs, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    w_plus, ranks = signed_rank_stat(d)
    n = ranks.size
    if n < 5:
        raise InsufficientDataError(f"need at least 5 non-zero differences, got {n}")

    if n <= EXACT_MAX_N:
        counts, total = _exact_signed_rank_cdf(ranks)
        k = int(round(2 * w_plus))
        n_assign = 2.0**n
        lower = counts[: k + 1].sum() / n_assign
        upper = counts[k:].sum() / n_assign
        p = min(1.0, 2.0 * min(lower, upper))
        return TestResult(w_plus, p, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, 2.0 * float(special.ndtr(-z)))
    return TestResult(w_plus, max(p, _P_FLOOR), "normal_approx")


def mcnemar_exact(b: int, c: int) -> TestResult:
    """Exact McNemar test on the discordant counts ``b`` and ``c``."""
    if b < 0 or c < 0:
        raise ValueError("discordant counts must be non-negative")
    n = b + c
    if n == 0:
        return TestResult(0.0, 1.0, "exact")
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return TestResult(float(k), min(1.0, 2.0 * tail), "exact")


def bootstrap_mean_ci(
    diffs: Sequence[float], B: int = 10_000, level: float = 0.95, seed: int = 0
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``diffs``."""
    d = np.asarray(diffs, dtype=float)
    if d.size < 2:
        raise InsufficientDataError("bootstrap needs at least 2 values")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, d.size, size=(B, d.size))
    means = d[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def spearman(x: Sequence[float], y: Sequence[float]) -> SpearmanResult:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    n = xa.size
    if n < 5:
        raise InsufficientDataError("spearman needs n >= 5")
    rx = sps.rankdata(xa)
    ry = sps.rankdata(ya)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        raise ValueError("zero rank variance")
    rho = float(np.clip(rx @ ry / denom, -1.0, 1.0))
    if abs(rho) == 1.0:
        return SpearmanResult(rho, _P_FLOOR)
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(sps.t.sf(abs(t), df=n - 2))
    return SpearmanResult(rho, min(1.0, max(p, _P_FLOOR)))
