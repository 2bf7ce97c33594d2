"""Select a balanced set of counterfactual queries from perturbed replays of
a toy latch-pushing task.

Run: python3 demos/04_balanced_counterfactual_queries.py
"""
import numpy as np

from nmscm.sampler import balanced_queries, query_stats

sel, pool, rollouts = balanced_queries(n_rollouts=50, per_rollout=8, budget=32, seed=7)
rate = np.mean([r.success for r in rollouts])
print(f"{len(rollouts)} factual rollouts (success rate {rate:.2f}), {len(pool)} perturbed replays")
labels = ("SS", "SF", "FS", "FF")
print("pool transitions:", {lab: sum(c.transition == lab for c in pool) for lab in labels})

st = query_stats(sel.queries)
print(f"\nselected {st.queries} queries, one per factual rollout")
print(f"success-change rate {st.change_rate:.2f}; transitions SS/SF/FS/FF = {st.transition_string()}")
print(f"{sel.from_change} drawn from the success-change side, the rest from the no-change side")
for q in sel.queries[:6]:
    print(f"  rollout {q.factual_id:2d} window {q.window} {q.transition}  endpoint shift {q.endpoint_delta:.3f}")
