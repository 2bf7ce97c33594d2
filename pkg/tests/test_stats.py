import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from nmscm import stats


def enumerate_signed_rank_p(d):
    """Two-sided p by listing all 2^n sign flips (average ranks for ties)."""
    d = np.asarray(d, float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    obs = ranks[d > 0].sum()
    sums = np.array([np.dot(s, ranks) for s in itertools.product((0, 1), repeat=d.size)])
    lower = np.mean(sums <= obs + 1e-9)
    upper = np.mean(sums >= obs - 1e-9)
    return min(1.0, 2 * min(lower, upper))


@pytest.mark.parametrize("n", range(5, 13))
def test_wilcoxon_exact_matches_enumeration(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        d = rng.normal(0.4, 1.0, size=n)
        assert stats.wilcoxon_signed_rank(d).p_two_sided == pytest.approx(enumerate_signed_rank_p(d), abs=1e-12)


def test_wilcoxon_exact_with_ties_and_zeros():
    d = [1, -1, 2, 2, 0, 3, -3, 4, 0, 5]
    res = stats.wilcoxon_signed_rank(d)
    assert res.method == "exact"
    assert res.p_two_sided == pytest.approx(enumerate_signed_rank_p(d), abs=1e-12)


def test_wilcoxon_matches_scipy_without_ties():
    rng = np.random.default_rng(0)
    d = rng.normal(0.5, 1, size=15)
    ref = sps.wilcoxon(d, method="exact").pvalue
    assert stats.wilcoxon_signed_rank(d).p_two_sided == pytest.approx(ref, rel=1e-10)


def test_wilcoxon_large_n_uses_normal_approximation():
    rng = np.random.default_rng(1)
    res = stats.wilcoxon_signed_rank(rng.normal(0.3, 1, size=40))
    assert res.method == "normal_approx"
    assert 0 < res.p_two_sided <= 1


def test_wilcoxon_all_positive_n10():
    # W+ is the maximum, so p = 2 / 2^10
    assert stats.wilcoxon_signed_rank(np.arange(1, 11)).p_two_sided == pytest.approx(2 / 1024)


def test_wilcoxon_rejects_small_and_nonfinite():
    with pytest.raises(stats.InsufficientDataError):
        stats.wilcoxon_signed_rank([1, 2, 0, 0, 3, 4])
    with pytest.raises(ValueError):
        stats.wilcoxon_signed_rank([1, 2, np.nan, 3, 4, 5])


@given(st.lists(st.floats(-10, 10, allow_nan=False).filter(lambda x: abs(x) > 1e-3), min_size=5, max_size=12))
@settings(max_examples=40, deadline=None)
def test_wilcoxon_sign_symmetry(d):
    a = stats.wilcoxon_signed_rank(d).p_two_sided
    b = stats.wilcoxon_signed_rank([-x for x in d]).p_two_sided
    assert a == pytest.approx(b, abs=1e-12)
    assert 0 < a <= 1


def test_mcnemar_six_zero():
    assert stats.mcnemar_exact(6, 0).p_two_sided == pytest.approx(0.03125, abs=1e-15)


@pytest.mark.parametrize("b,c", [(3, 7), (0, 0), (10, 10), (1, 12)])
def test_mcnemar_matches_binomial_test(b, c):
    ref = 1.0 if b + c == 0 else sps.binomtest(b, b + c, 0.5).pvalue
    assert stats.mcnemar_exact(b, c).p_two_sided == pytest.approx(ref, rel=1e-12)


def test_mcnemar_rejects_negative():
    with pytest.raises(ValueError):
        stats.mcnemar_exact(-1, 2)


def test_bootstrap_deterministic_and_ordered():
    d = np.random.default_rng(2).normal(size=30)
    lo, hi = stats.bootstrap_mean_ci(d, seed=4)
    assert (lo, hi) == stats.bootstrap_mean_ci(d, seed=4)
    assert lo < d.mean() < hi


def normal_theory_coverage(n, level=0.95):
    """Large-B coverage of the percentile interval for a gaussian mean: the interval is
    mean +- z * sd_mle / sqrt(n), so coverage is P(|t_{n-1}| <= z sqrt((n-1)/n))."""
    z = sps.norm.ppf(0.5 + level / 2)
    return 1 - 2 * sps.t.sf(z * math.sqrt((n - 1) / n), n - 1)


@pytest.mark.slow
def test_bootstrap_long_run_coverage_matches_theory():
    rng = np.random.default_rng(99)
    reps = 4000
    hits = sum(lo <= 0.0 <= hi for lo, hi in
               (stats.bootstrap_mean_ci(rng.normal(size=30), B=2000, seed=k) for k in range(reps)))
    expected = normal_theory_coverage(30)
    se = math.sqrt(expected * (1 - expected) / reps)
    assert abs(hits / reps - expected) < 3 * se


def test_bootstrap_interval_matches_normal_theory_width():
    d = np.random.default_rng(7).normal(size=400)
    lo, hi = stats.bootstrap_mean_ci(d, seed=1)
    half = 1.959964 * d.std() / math.sqrt(d.size)
    assert (hi - lo) / 2 == pytest.approx(half, rel=0.05)


def test_bootstrap_rejects_tiny_input():
    with pytest.raises(stats.InsufficientDataError):
        stats.bootstrap_mean_ci([1.0])


def test_spearman_matches_scipy():
    rng = np.random.default_rng(5)
    x = rng.normal(size=24)
    y = x + rng.normal(size=24)
    ref = sps.spearmanr(x, y)
    res = stats.spearman(x, y)
    assert res.rho == pytest.approx(ref.statistic, abs=1e-12)
    assert res.p == pytest.approx(ref.pvalue, rel=1e-8)


def test_spearman_perfect_monotone():
    x = np.arange(10.0)
    assert stats.spearman(x, np.exp(x)).rho == pytest.approx(1.0)
    assert math.isfinite(stats.spearman(x, -x).p)
