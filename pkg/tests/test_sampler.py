import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmscm import sampler
from nmscm.sampler import (
    CandidateQuery,
    SamplerConfig,
    balanced_queries,
    generate_candidates,
    informative_filter,
    make_candidate,
    nearest_rank,
    query_stats,
    save_queries,
    save_stats,
    scripted_rollout,
    select_balanced,
    simulate,
    toy_rollout,
)

LABELS = ("SS", "SF", "FS", "FF")


def fake(fid, transition, delta):
    s, c = transition[0] == "S", transition[1] == "S"
    return CandidateQuery(fid, (0, 1), np.zeros(1), 0.0, s, delta, c, transition, s != c, float(delta))


def reference_selection(pool, budget, order=LABELS):
    """Straight-line restatement of the selection rules, written without queues.

    Split by success change, fill ceil(budget/2) from the change side and the
    rest from the other side by cycling over labels (best remaining candidate
    of each label per turn, never reusing a factual), then back-fill by
    descending delta.
    """
    used, chosen = set(), []

    def best(cands):
        ok = [c for c in cands if c.factual_id not in used]
        if not ok:
            return None
        return min(ok, key=lambda c: (-c.endpoint_delta, c.factual_id))

    def cycle(cands, k):
        got = []
        while len(got) < k:
            progressed = False
            for lab in order:
                if len(got) >= k:
                    break
                c = best([x for x in cands if x.transition == lab])
                if c is not None:
                    used.add(c.factual_id)
                    got.append(c)
                    progressed = True
            if not progressed:
                break
        return got

    change = [c for c in pool if c.success_change]
    rest = [c for c in pool if not c.success_change]
    first = cycle(change, math.ceil(budget / 2))
    chosen = first + cycle(rest, budget - len(first))
    while len(chosen) < budget:
        left = [c for c in pool if all(c is not x for x in chosen)]
        c = best(left)
        if c is None:
            break
        used.add(c.factual_id)
        chosen.append(c)
    return chosen


def same(a, b):
    return len(a) == len(b) and all(x is y for x, y in zip(a, b))


# ---------------------------------------------------------------- environment


def test_zero_actions_never_succeed():
    states = simulate(np.zeros(sampler.HORIZON), np.zeros(sampler.HORIZON))
    assert np.all(states[:, 0] == 0.0)
    assert not scripted_rollout(np.zeros(40), np.zeros(40)).success


def test_rollout_replay_is_deterministic():
    a, b = toy_rollout(3), toy_rollout(3)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(simulate(a.actions, a.exo), a.states)


def test_scripted_push_succeeds():
    r = scripted_rollout(np.full(40, 0.2), np.full(40, 0.1))
    assert r.success
    # effector at -0.5 gains 0.202 per step, so contact starts at step 2;
    # the remaining 38 steps each push the latch by 0.15 * 0.2
    assert r.endpoint == pytest.approx(38 * 0.03, abs=1e-12)


def test_negative_branch_closes_latch():
    r = scripted_rollout(np.full(40, 0.2), np.full(40, -0.1))
    assert r.endpoint < 0
    assert not r.success


def test_success_rate_in_target_band():
    rate = np.mean([toy_rollout(s).success for s in range(1000)])
    assert 0.25 <= rate <= 0.6


# ---------------------------------------------------------------- candidates


def test_zero_perturbation_candidate_is_reflexive():
    r = toy_rollout(1)
    c = make_candidate(r, 5, np.zeros(3))
    assert c.endpoint_delta == 0 and not c.success_change
    assert c.transition in ("SS", "FF")


def test_candidate_window_bounds():
    with pytest.raises(ValueError):
        make_candidate(toy_rollout(1), 38, np.zeros(3))
    with pytest.raises(ValueError):
        generate_candidates([toy_rollout(1)], 0, 0)


def test_pool_size_labels_and_replay():
    rollouts = [toy_rollout(s, factual_id=k) for k, s in enumerate(range(100, 150))]
    pool = generate_candidates(rollouts, 8, seed=7)
    assert len(pool) == 400
    by_id = {r.factual_id: r for r in rollouts}
    for c in pool:
        assert 1 <= c.window[1] <= sampler.MAX_WINDOW
        assert c.transition == ("S" if c.success else "F") + ("S" if c.cf_success else "F")
        assert c.success_change == (c.success != c.cf_success)
        again = simulate(c.actions, by_id[c.factual_id].exo)[-1, 0]
        assert again == c.cf_endpoint  # bitwise replay
        assert c.endpoint_delta == abs(c.cf_endpoint - c.endpoint)


# ---------------------------------------------------------------- filter


def test_nearest_rank_percentile():
    assert nearest_rank(range(1, 11), 35) == 4
    assert nearest_rank([5.0], 35) == 5.0


def test_filter_hand_example():
    pool = [fake(k, "FF", d) for k, d in enumerate([0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10])]
    kept = informative_filter(pool)
    assert sorted(c.endpoint_delta for c in kept) == [5, 6, 7, 8, 9, 10]


def test_filter_keeps_all_changes():
    pool = [fake(k, "SF", 0.0) for k in range(5)]
    assert len(informative_filter(pool)) == 5


def test_filter_empty_cases():
    with pytest.raises(ValueError):
        informative_filter([])
    with pytest.warns(UserWarning):
        assert informative_filter([fake(0, "SS", 0.0)]) == []


# ---------------------------------------------------------------- selection


def test_selection_on_one_candidate_per_factual():
    pool = [fake(k, LABELS[k % 4], 1.0 + k) for k in range(64)]
    sel = select_balanced(pool, SamplerConfig(32))
    ids = [c.factual_id for c in sel]
    assert len(sel) == 32 and len(set(ids)) == 32
    assert np.mean([c.success_change for c in sel]) == 0.5


def test_dominant_factual_selected_once():
    pool = [fake(0, lab, 100.0 + k) for k, lab in enumerate(["SF", "FS"] * 10)]
    pool += [fake(k, "SS", 1.0) for k in range(1, 20)]
    sel = select_balanced(pool, SamplerConfig(8))
    assert [c.factual_id for c in sel].count(0) == 1
    assert len({c.factual_id for c in sel}) == len(sel) == 8


def test_unreachable_budget_is_flagged():
    pool = [fake(k, "SF", 1.0) for k in range(3)]
    with pytest.warns(UserWarning):
        sel = select_balanced(pool, SamplerConfig(10))
    assert sel.short and len(sel) == 3


def test_round_robin_fairness_before_backfill():
    sel, _, _ = balanced_queries(50, 8, 32, 7)
    change = sel.queries[: sel.from_change]
    counts = [sum(c.transition == lab for c in change) for lab in ("SF", "FS")]
    assert max(counts) - min(counts) <= 1


def test_matches_reference_on_60_candidate_pool():
    rng = np.random.default_rng(0)
    pool = [fake(int(rng.integers(0, 25)), LABELS[int(rng.integers(0, 4))], float(rng.integers(1, 40)))
            for _ in range(60)]
    assert same(select_balanced(pool, SamplerConfig(16)).queries, reference_selection(pool, 16))


def test_matches_reference_on_toy_pool():
    rollouts = [toy_rollout(int(s), factual_id=k)
                for k, s in enumerate(np.random.SeedSequence(7).generate_state(50))]
    pool = informative_filter(generate_candidates(rollouts, 8, 7))
    assert same(select_balanced(pool, SamplerConfig(32)).queries, reference_selection(pool, 32))


@given(st.lists(st.tuples(st.integers(0, 15), st.sampled_from(LABELS), st.integers(0, 6)), min_size=1, max_size=60),
       st.integers(1, 20))
@settings(max_examples=200, deadline=None)
def test_matches_reference_property(rows, budget):
    pool = [fake(fid, lab, float(d)) for fid, lab, d in rows]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = select_balanced(pool, SamplerConfig(budget)).queries
    assert same(got, reference_selection(pool, budget))
    assert len({c.factual_id for c in got}) == len(got)


def test_balance_with_ample_pool():
    pool = [fake(k, LABELS[k % 4], 1.0) for k in range(200)]
    for budget in (1, 7, 32):
        sel = select_balanced(pool, SamplerConfig(budget))
        assert abs(np.mean([c.success_change for c in sel]) - 0.5) <= 1 / budget


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(0)
    with pytest.raises(ValueError):
        SamplerConfig(4, transition_order=("SS", "SS", "FS", "FF"))


# ---------------------------------------------------------------- stats and files


def test_toy_demo_stats(tmp_path):
    sel, pool, _ = balanced_queries(50, 8, 32, 7)
    assert len(pool) == 400
    st_ = query_stats(sel.queries)
    assert st_.queries == 32 and st_.change_rate == 0.5
    assert sum(st_.transitions.values()) == 32
    save_stats(st_, tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert set(doc) >= {"queries", "factual_success", "cf_success", "change_rate", "transition_counts", "window_mean"}
    assert doc["transition_counts"].count("/") == 3
    save_queries(sel.queries, tmp_path / "q.json")
    assert len(json.loads((tmp_path / "q.json").read_text())) == 32


def test_empty_stats():
    s = query_stats([])
    assert s.queries == 0 and s.change_rate == 0.0 and s.transition_string() == "0/0/0/0"


def test_stats_row_format():
    s = query_stats([fake(0, "SS", 1), fake(1, "SF", 1), fake(2, "FF", 1), fake(3, "FF", 1)])
    assert s.transition_string() == "1/1/0/2"
    assert s.change_rate == 0.25
