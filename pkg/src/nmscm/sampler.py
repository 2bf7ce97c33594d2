"""Balanced counterfactual query selection on a deterministic toy latch.

The latch is a one-dimensional contact toy.  An effector starting below a
latch at angle 0 integrates its actions (plus a small exogenous drift).  Once
it reaches the latch it pushes it: the angle moves by ``gain * action *
branch`` and the effector rides on the latch.  ``branch`` is drawn from the
sign of the exogenous perturbation at the step contact begins, so whether a
push opens or closes the latch depends on context.  An episode succeeds when
the final angle reaches the goal.

Counterfactuals replay an altered action sequence with the same exogenous
vector, so they are exact.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

HORIZON = 40
CONTACT = 0.08
GOAL = 0.5
GAIN = 0.15
EFFECTOR_START = -0.5
DRIFT_SCALE = 0.02
ACTION_MEAN = 0.18
ACTION_SD = 0.1
PERTURBATION_SD = 0.5
MAX_WINDOW = 8

TRANSITIONS = ("SS", "SF", "FS", "FF")


def transition_label(success: bool, cf_success: bool) -> str:
    return ("S" if success else "F") + ("S" if cf_success else "F")


@dataclass(frozen=True)
class FactualRollout:
    factual_id: int
    states: np.ndarray  # (T + 1, 2): angle, effector
    actions: np.ndarray  # (T,)
    exo: np.ndarray  # (T,)
    success: bool
    endpoint: float


def simulate(actions: np.ndarray, exo: np.ndarray) -> np.ndarray:
    """States (angle, effector) after each step, starting state included."""
    actions = np.asarray(actions, dtype=float)
    exo = np.asarray(exo, dtype=float)
    states = np.empty((actions.size + 1, 2))
    angle, eff = 0.0, EFFECTOR_START
    states[0] = angle, eff
    in_contact = False
    branch = 1.0
    for t, a in enumerate(actions):
        eff += a + DRIFT_SCALE * exo[t]
        touching = eff > angle - CONTACT
        if touching:
            if not in_contact:
                branch = 1.0 if exo[t] >= 0 else -1.0
            angle += GAIN * a * branch
            eff = min(eff, angle)
        in_contact = touching
        states[t + 1] = angle, eff
    return states


def _rollout_from(factual_id: int, actions: np.ndarray, exo: np.ndarray) -> FactualRollout:
    states = simulate(actions, exo)
    endpoint = float(states[-1, 0])
    return FactualRollout(factual_id, states, np.asarray(actions, float), np.asarray(exo, float),
                          endpoint >= GOAL, endpoint)


def toy_rollout(seed: int, factual_id: Optional[int] = None) -> FactualRollout:
    rng = np.random.default_rng([seed, 0x1a7c])
    actions = ACTION_MEAN + ACTION_SD * rng.standard_normal(HORIZON)
    exo = rng.standard_normal(HORIZON)
    return _rollout_from(seed if factual_id is None else factual_id, actions, exo)


def scripted_rollout(actions: Sequence[float], exo: Sequence[float], factual_id: int = 0) -> FactualRollout:
    return _rollout_from(factual_id, np.asarray(actions, float), np.asarray(exo, float))


# --------------------------------------------------------------------------
# candidates


@dataclass(frozen=True)
class CandidateQuery:
    factual_id: int
    window: tuple[int, int]  # (start, length)
    actions: np.ndarray
    endpoint: float
    success: bool
    cf_endpoint: float
    cf_success: bool
    transition: str
    success_change: bool
    endpoint_delta: float

    def to_json(self) -> dict:
        return {
            "factual_id": self.factual_id,
            "window": list(self.window),
            "actions": self.actions.tolist(),
            "endpoint": self.endpoint,
            "success": self.success,
            "cf_endpoint": self.cf_endpoint,
            "cf_success": self.cf_success,
            "transition": self.transition,
            "success_change": self.success_change,
            "endpoint_delta": self.endpoint_delta,
        }


def make_candidate(rollout: FactualRollout, start: int, perturbation: Sequence[float]) -> CandidateQuery:
    """Add ``perturbation`` to the actions from ``start`` on and replay with the same exo."""
    pert = np.asarray(perturbation, dtype=float)
    if start < 0 or start + pert.size > rollout.actions.size or pert.size < 1:
        raise ValueError("window outside the episode")
    actions = rollout.actions.copy()
    actions[start: start + pert.size] += pert
    cf_end = float(simulate(actions, rollout.exo)[-1, 0])
    cf_success = cf_end >= GOAL
    return CandidateQuery(
        rollout.factual_id,
        (int(start), int(pert.size)),
        actions,
        rollout.endpoint,
        rollout.success,
        cf_end,
        cf_success,
        transition_label(rollout.success, cf_success),
        rollout.success != cf_success,
        abs(cf_end - rollout.endpoint),
    )


def generate_candidates(rollouts: Iterable[FactualRollout], per_rollout: int, seed: int) -> list[CandidateQuery]:
    if per_rollout < 1:
        raise ValueError("per_rollout must be >= 1")
    pool = []
    for r in rollouts:
        rng = np.random.default_rng([seed, r.factual_id])
        for _ in range(per_rollout):
            length = int(rng.integers(1, MAX_WINDOW + 1))
            start = int(rng.integers(0, r.actions.size - length + 1))
            pool.append(make_candidate(r, start, PERTURBATION_SD * rng.standard_normal(length)))
    return pool


# --------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class SamplerConfig:
    budget: int = 32
    percentile: float = 35.0
    change_fraction: float = 0.5
    transition_order: tuple[str, ...] = TRANSITIONS

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if sorted(self.transition_order) != sorted(TRANSITIONS):
            raise ValueError("transition order must be a permutation of SS/SF/FS/FF")


def nearest_rank(values: Sequence[float], pct: float) -> float:
    x = np.sort(np.asarray(values, dtype=float))
    rank = max(1, math.ceil(pct / 100.0 * x.size))
    return float(x[rank - 1])


def informative_filter(pool: Sequence[CandidateQuery], cfg: SamplerConfig = SamplerConfig()) -> list[CandidateQuery]:
    if len(pool) == 0:
        raise ValueError("empty candidate pool")
    positive = [c.endpoint_delta for c in pool if c.endpoint_delta > 0]
    threshold = nearest_rank(positive, cfg.percentile) if positive else math.inf
    kept = [c for c in pool if c.success_change or c.endpoint_delta > threshold]
    if not kept:
        warnings.warn("no informative candidates in the pool")
    return kept


def _priority(c: CandidateQuery):
    return (-c.endpoint_delta, c.factual_id)


def _round_robin(cands: Sequence[CandidateQuery], k: int, used: set, order: Sequence[str]) -> list[CandidateQuery]:
    queues = {lab: sorted((c for c in cands if c.transition == lab), key=_priority) for lab in order}
    pos = dict.fromkeys(order, 0)
    picked: list[CandidateQuery] = []
    active = [lab for lab in order if queues[lab]]
    while len(picked) < k and active:
        for lab in list(active):
            if len(picked) >= k:
                break
            q = queues[lab]
            while pos[lab] < len(q) and q[pos[lab]].factual_id in used:
                pos[lab] += 1
            if pos[lab] == len(q):
                active.remove(lab)
                continue
            c = q[pos[lab]]
            pos[lab] += 1
            used.add(c.factual_id)
            picked.append(c)
    return picked


@dataclass
class Selection:
    queries: list
    change_target: int
    from_change: int
    from_no_change: int
    backfilled: int
    short: bool

    def __iter__(self):
        return iter(self.queries)

    def __len__(self):
        return len(self.queries)


def select_balanced(pool: Sequence[CandidateQuery], cfg: SamplerConfig = SamplerConfig()) -> Selection:
    """Half from the success-changing candidates, half from the rest, one query per factual.

    ``pool`` is the informative subset.  Each half is picked round-robin over
    transition labels; any shortfall is back-filled by descending endpoint delta.
    """
    change = [c for c in pool if c.success_change]
    stay = [c for c in pool if not c.success_change]
    used: set = set()
    target = math.ceil(cfg.budget * cfg.change_fraction)
    first = _round_robin(change, target, used, cfg.transition_order)
    second = _round_robin(stay, cfg.budget - len(first), used, cfg.transition_order)
    chosen = first + second
    taken = {id(c) for c in chosen}
    fill = []
    for c in sorted(pool, key=_priority):
        if len(chosen) + len(fill) >= cfg.budget:
            break
        if id(c) in taken or c.factual_id in used:
            continue
        used.add(c.factual_id)
        fill.append(c)
    chosen += fill
    short = len(chosen) < cfg.budget
    if short:
        warnings.warn(f"budget {cfg.budget} unreachable: selected {len(chosen)} queries")
    return Selection(chosen, target, len(first), len(second), len(fill), short)


@dataclass(frozen=True)
class QueryStats:
    queries: int
    factual_success: float
    cf_success: float
    change_rate: float
    transitions: dict = field(default_factory=dict)
    window_mean: float = 0.0

    def transition_string(self) -> str:
        return "/".join(str(self.transitions.get(t, 0)) for t in TRANSITIONS)

    def to_json(self) -> dict:
        return asdict(self) | {"transition_counts": self.transition_string()}


def query_stats(queries: Sequence[CandidateQuery]) -> QueryStats:
    queries = list(queries)
    counts = {t: sum(q.transition == t for q in queries) for t in TRANSITIONS}
    if not queries:
        return QueryStats(0, 0.0, 0.0, 0.0, counts, 0.0)
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    return QueryStats(
        len(queries),
        mean([q.success for q in queries]),
        mean([q.cf_success for q in queries]),
        mean([q.success_change for q in queries]),
        counts,
        mean([q.window[1] for q in queries]),
    )


def save_queries(queries: Sequence[CandidateQuery], path: str | Path) -> None:
    Path(path).write_text(json.dumps([q.to_json() for q in queries], indent=1))


def save_stats(stats: QueryStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_json(), indent=2, sort_keys=True))


def balanced_queries(n_rollouts: int, per_rollout: int, budget: int, seed: int):
    """Whole pipeline: rollouts, candidates, filter, selection; returns (selection, pool, rollouts)."""
    rollouts = [toy_rollout(int(s), factual_id=k)
                for k, s in enumerate(np.random.SeedSequence(seed).generate_state(n_rollouts))]
    pool = generate_candidates(rollouts, per_rollout, seed)
    informative = informative_filter(pool, SamplerConfig(budget))
    return select_balanced(informative, SamplerConfig(budget)), pool, rollouts
