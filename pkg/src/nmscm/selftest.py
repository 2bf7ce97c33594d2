"""Fast property battery behind ``nmscm selftest``; needs no test runner."""
from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import stats
from .inverter import InverterModel, TrainConfig, gradient_check, loss_and_grad, sample_draws
from .sampler import balanced_queries
from .scm import Bijection, CounterfactualQuery, Intervention, exogenous_isomorph
from .scm import observational_equivalence_check, transport_variation
from .zoo import FAMILIES, MechanismFamily, SweepConfig, make_counterexample_pair, make_scm


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float


def _counterexample() -> tuple[bool, str]:
    m, mp = make_counterexample_pair()
    q = CounterfactualQuery(np.array([1.0, 0.7]), Intervention((0,), (-1.0,)))
    a, b = m.counterfactual(q), mp.counterfactual(q)
    exact = np.allclose(a, [-1, -0.7], atol=1e-12, rtol=0) and np.allclose(b, [-1, 0.7], atol=1e-12, rtol=0)
    ks = observational_equivalence_check(m, mp, 10_000, 0).passed
    return exact and ks, f"M {a.tolist()}, M' {b.tolist()}, KS pass {ks}"


def random_bijection(rng: np.random.Generator) -> Bijection:
    """Strictly increasing affine or sinh-based map with a closed-form inverse."""
    a = float(rng.uniform(0.5, 2.0))
    b = float(rng.normal())
    if rng.random() < 0.5:
        return Bijection(lambda u: a * u + b, lambda y: (y - b) / a, lambda u: a * np.ones_like(u), "affine")
    return Bijection(lambda u: a * np.sinh(u) + b, lambda y: np.arcsinh((y - b) / a),
                     lambda u: a * np.cosh(u), "sinh")


def _ei_pairs(n_pairs: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst_tv = worst_cf = 0.0
    for k in range(n_pairs):
        fam = ("threshold_flip", "smooth_flip", "global_monotone")[k % 3]
        scm, _ = make_scm(SweepConfig(MechanismFamily(fam), "gaussian", 3, 2000, k))
        ei = exogenous_isomorph(scm, [random_bijection(rng) for _ in range(3)])
        v, _ = scm.sample(rng, 20)
        for i in range(3):
            worst_tv = max(worst_tv, transport_variation(scm, ei, i, v[:5, :i], np.linspace(-1.5, 1.5, 7)))
        for row in v:
            q = CounterfactualQuery(row, Intervention((0,), (float(rng.normal()),)))
            worst_cf = max(worst_cf, float(np.max(np.abs(scm.counterfactual(q) - ei.counterfactual(q)))))
    return worst_tv < 1e-9 and worst_cf < 1e-8, f"max transport variation {worst_tv:.2e}, max CF gap {worst_cf:.2e}"


def _round_trips() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for fam in FAMILIES:
        family = MechanismFamily(fam, 0.5 if fam == "bridge" else None)
        scm, _ = make_scm(SweepConfig(family, "mixture", 3, 2000, 3))
        u = scm.sample_u(rng, 500)
        worst = max(worst, float(np.max(np.abs(scm.abduct(scm.solve(u)) - u))))
    model = InverterModel.random(3, rng)
    u = rng.standard_normal((500, 3))
    worst_model = float(np.max(np.abs(model.abduct(model.forward(u)) - u)))
    return worst < 1e-8 and worst_model < 1e-6, f"zoo {worst:.2e}, inverter {worst_model:.2e}"


def _gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    cfg = TrainConfig()
    errs = []
    for _ in range(3):
        model = InverterModel.random(3, rng)
        errs.append(gradient_check(model, rng.standard_normal((32, 3)), cfg, n_params=20))
    model = InverterModel.random(3, rng)
    batch = rng.standard_normal((32, 3))
    draws = sample_draws(np.random.default_rng(0), 32, 3)

    def corrupted(mdl):
        g = loss_and_grad(mdl, batch, draws, cfg)[1].copy()
        g[::7] *= 1.1
        return g

    bad = gradient_check(model, batch, cfg, n_params=model.n_params, grad_fn=corrupted)
    return max(errs) < 1e-4 and bad > 1e-3, f"max rel error {max(errs):.2e}, corrupted {bad:.2e}"


def _stats() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for n in range(5, 11):
        d = rng.normal(size=n) + 0.3
        res = stats.wilcoxon_signed_rank(d)
        ranks = np.argsort(np.argsort(np.abs(d))) + 1.0
        obs = res.statistic
        tot = []
        for signs in itertools.product((0, 1), repeat=n):
            tot.append(float(np.dot(signs, ranks)))
        tot = np.array(tot)
        p = min(1.0, 2 * min(np.mean(tot <= obs + 1e-12), np.mean(tot >= obs - 1e-12)))
        worst = max(worst, abs(p - res.p_two_sided))
    mc = stats.mcnemar_exact(6, 0).p_two_sided
    return worst < 1e-12 and abs(mc - 0.03125) < 1e-12, f"enumeration gap {worst:.1e}, McNemar(6,0) {mc}"


def _sampler() -> tuple[bool, str]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sel, _, _ = balanced_queries(50, 8, 32, 7)
    ids = [q.factual_id for q in sel.queries]
    rate = float(np.mean([q.success_change for q in sel.queries]))
    ok = len(sel.queries) == 32 and len(set(ids)) == len(ids) and rate == 0.5
    return ok, f"{len(sel.queries)} queries, {len(set(ids))} unique factuals, change rate {rate}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "counterexample": _counterexample,
    "exogenous isomorphism": _ei_pairs,
    "solve/abduct round trip": _round_trips,
    "gradients": _gradients,
    "stats": _stats,
    "sampler": _sampler,
}


def run_selftest(log: Callable[[str], None] = print) -> bool:
    results = []
    for name, fn in CHECKS.items():
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report and carry on
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(Check(name, bool(passed), detail, time.perf_counter() - start))
        c = results[-1]
        log(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail} ({c.seconds:.1f}s)")
    return all(c.passed for c in results)
