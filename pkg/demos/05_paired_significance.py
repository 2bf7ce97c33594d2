"""Paired significance tests on matched runs.

Run: python3 demos/05_paired_significance.py
"""
import numpy as np

from nmscm import stats

rng = np.random.default_rng(1)
baseline = rng.uniform(0.6, 0.8, size=9)
ours = baseline * rng.uniform(0.1, 0.4, size=9)
diffs = ours - baseline
w = stats.wilcoxon_signed_rank(diffs)
lo, hi = stats.bootstrap_mean_ci(diffs, seed=0)
print(f"9 matched runs, mean CF-MSE difference {diffs.mean():+.3f}")
print(f"Wilcoxon signed-rank ({w.method}): statistic {w.statistic:.0f}, two-sided p {w.p_two_sided:.4f}")
print(f"95% percentile bootstrap CI of the mean difference: [{lo:+.3f}, {hi:+.3f}]")

print(f"\nexact McNemar with 6 discordant successes and 0 failures: p = {stats.mcnemar_exact(6, 0).p_two_sided}")

gain = np.array([0.00, 0.01, 0.12, 0.09, 0.30, 0.25, 0.41, 0.52])
nms = np.array([0.0, 0.0, 0.3, 0.3, 0.6, 0.6, 0.9, 0.9])
sp = stats.spearman(gain, nms)
print(f"Spearman correlation of gain with NMS: rho {sp.rho:.3f}, p {sp.p:.4f}")
