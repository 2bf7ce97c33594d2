import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from nmscm.noise import ExogenousDistribution, make_noise
from nmscm.scm import (
    Bijection,
    CausalOrder,
    CounterfactualQuery,
    Intervention,
    Mechanism,
    TriangularScm,
    bisect_inverse,
    exogenous_isomorph,
    inverse_transport,
    ks_critical_value,
    observational_equivalence_check,
    sgn,
    transport_variation,
)
from nmscm.zoo import MechanismFamily, SweepConfig, make_counterexample_pair, make_scm


def make_bijection(rng, kind):
    a = float(rng.uniform(0.5, 2.0))
    b = float(rng.normal())
    if kind == "affine":
        return Bijection(lambda u: a * u + b, lambda y: (y - b) / a, lambda u: a + 0 * u, "affine")
    if kind == "sinh":
        return Bijection(lambda u: a * np.sinh(u) + b, lambda y: np.arcsinh((y - b) / a),
                         lambda u: a * np.cosh(u), "sinh")
    if kind == "cubic":
        # u + u^3 / 3 scaled; inverse via the real cubic root
        def inv(y):
            z = (np.asarray(y) - b) / a
            s = np.sqrt(9 * z * z / 4 + 1)
            return np.cbrt(1.5 * z + s) + np.cbrt(1.5 * z - s)
        return Bijection(lambda u: a * (u + u**3 / 3) + b, inv, lambda u: a * (1 + u * u), "cubic")
    # decreasing
    return Bijection(lambda u: -a * u + b, lambda y: (b - y) / a, lambda u: -a + 0 * u, "negated")


def random_ei_pair(seed):
    rng = np.random.default_rng(seed)
    fam = ("threshold_flip", "smooth_flip", "global_monotone")[seed % 3]
    noise = ("gaussian", "mixture", "skewed", "student_t")[seed % 4]
    scm, _ = make_scm(SweepConfig(MechanismFamily(fam), noise, 3, 2000, seed))
    kinds = ["sinh", "cubic", "affine", "negated"]
    psis = [make_bijection(rng, kinds[(seed + j) % 4]) for j in range(3)]
    return scm, exogenous_isomorph(scm, psis)


def test_sgn_is_plus_one_at_zero():
    assert sgn(np.array([0.0, -0.0, -1e-300, 2.0])).tolist() == [1.0, 1.0, -1.0, 1.0]


def test_counterexample_values_exact():
    m, mp = make_counterexample_pair()
    q = CounterfactualQuery(np.array([1.0, 0.7]), Intervention((0,), (-1.0,)))
    np.testing.assert_allclose(m.counterfactual(q), [-1.0, -0.7], atol=1e-12, rtol=0)
    np.testing.assert_allclose(mp.counterfactual(q), [-1.0, 0.7], atol=1e-12, rtol=0)


def test_counterexample_observationally_equivalent():
    m, mp = make_counterexample_pair()
    rep = observational_equivalence_check(m, mp, 10_000, seed=3)
    assert rep.passed
    assert rep.critical == pytest.approx(1.6276 * np.sqrt(2 / 10_000), rel=1e-3)


def test_observational_check_detects_different_models():
    m, _ = make_counterexample_pair()
    shifted = TriangularScm(
        (m.mechanisms[0], Mechanism(1, lambda c, u: u + 0.2, lambda c, v: v - 0.2)), m.noise)
    assert not observational_equivalence_check(m, shifted, 10_000, seed=0).passed


def test_ks_critical_value_formula():
    assert ks_critical_value(100, 100, 0.05) == pytest.approx(1.3581 * np.sqrt(0.02), rel=1e-3)


def test_counterexample_transport_variation():
    m, mp = make_counterexample_pair()
    assert transport_variation(m, mp, 1, [[-1.0], [1.0]], [-1.0, 0.0, 1.0]) == pytest.approx(2.0)
    assert inverse_transport(m, mp, 1, [-2.0], 0.5) == pytest.approx(-0.5)


@pytest.mark.parametrize("seed", range(20))
def test_ei_pairs_agree(seed):
    a, b = random_ei_pair(seed)
    rng = np.random.default_rng(100 + seed)
    v, _ = a.sample(rng, 200)
    grid = np.linspace(-2, 2, 9)
    assert transport_variation(a, b, 0, [[], []], grid) < 1e-9
    for i in (1, 2):
        assert transport_variation(a, b, i, v[:10, :i], grid) < 1e-9
    worst = 0.0
    for row in v:
        t = int(rng.integers(0, 2))
        q = CounterfactualQuery(row, Intervention((t,), (float(rng.normal()),)))
        worst = max(worst, np.max(np.abs(a.counterfactual(q) - b.counterfactual(q))))
    assert worst < 1e-8


def test_ei_pair_preserves_observational_law():
    a, b = random_ei_pair(1)
    assert observational_equivalence_check(a, b, 5000, seed=1).passed


def test_ei_pair_preserves_likelihood():
    a, b = random_ei_pair(4)
    v, _ = a.sample(np.random.default_rng(0), 50)
    np.testing.assert_allclose(a.log_likelihood(v), b.log_likelihood(v), atol=1e-9)


@pytest.mark.parametrize("family", ["global_monotone", "threshold_flip", "smooth_flip"])
@pytest.mark.parametrize("noise", ["gaussian", "skewed", "mixture", "student_t"])
def test_solve_abduct_round_trip(family, noise):
    scm, _ = make_scm(SweepConfig(MechanismFamily(family), noise, 4, 2000, 5))
    u = scm.sample_u(np.random.default_rng(0), 1000)
    v = scm.solve(u)
    assert np.max(np.abs(scm.abduct(v) - u)) < 1e-8
    assert np.max(np.abs(scm.solve(scm.abduct(v)) - v)) < 1e-8


def test_empty_intervention_reproduces_factual():
    scm, _ = make_scm(SweepConfig(MechanismFamily("smooth_flip"), "gaussian", 3, 2000, 2))
    v, _ = scm.sample(np.random.default_rng(1), 5)
    for row in v:
        np.testing.assert_allclose(scm.counterfactual(CounterfactualQuery(row)), row, atol=1e-12)


def test_intervention_on_sink_leaves_others():
    scm, _ = make_scm(SweepConfig(MechanismFamily("threshold_flip"), "gaussian", 3, 2000, 2))
    row = scm.sample(np.random.default_rng(2), 1)[0][0]
    cf = scm.counterfactual(CounterfactualQuery(row, Intervention((2,), (5.0,))))
    np.testing.assert_allclose(cf, [row[0], row[1], 5.0])


def test_single_vector_and_batch_layouts():
    scm, _ = make_scm(SweepConfig(MechanismFamily("threshold_flip"), "gaussian", 3, 2000, 9))
    u = np.array([0.3, -0.2, 1.1])
    assert scm.solve(u).shape == (3,)
    assert scm.solve(u[None]).shape == (1, 3)
    with pytest.raises(ValueError):
        scm.solve(np.zeros(4))


def test_log_likelihood_integrates_to_one():
    # 1-D affine model: density of v is N(1, 2^2)
    mech = Mechanism(0, lambda c, u: 1 + 2 * u, lambda c, v: (v - 1) / 2, lambda c, u: 2 + 0 * u)
    scm = TriangularScm((mech,), ExogenousDistribution.iid("gaussian", 1))
    xs = np.linspace(-15, 17, 4001)
    dens = np.exp(scm.log_likelihood(xs[:, None]))
    np.testing.assert_allclose(dens, sps.norm(1, 2).pdf(xs), rtol=1e-12)


def test_nonidentity_causal_order():
    # variable 1 is the root, variable 0 depends on it
    m0 = Mechanism(0, lambda c, u: c[:, 0] + u, lambda c, v: v - c[:, 0])
    m1 = Mechanism(1, lambda c, u: 2 * u, lambda c, v: v / 2)
    scm = TriangularScm((m0, m1), ExogenousDistribution.iid("gaussian", 2), CausalOrder((1, 0)))
    v = scm.solve(np.array([0.5, 1.0]))
    np.testing.assert_allclose(v, [2.5, 2.0])
    np.testing.assert_allclose(scm.abduct(v), [0.5, 1.0])


def test_invalid_structures_rejected():
    with pytest.raises(ValueError):
        CausalOrder((0, 0))
    with pytest.raises(ValueError):
        Intervention((0, 0), (1.0, 2.0))
    with pytest.raises(ValueError):
        Intervention((0,), ())
    with pytest.raises(ValueError):
        Intervention((5,), (1.0,)).validate(3)


def test_intervention_do_helper():
    iv = Intervention.do(v2=1.5, v0=-1)
    assert iv.targets == (0, 2) and iv.values == (-1.0, 1.5)


@given(st.floats(-20, 20), st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_bisect_inverse_property(v, c):
    f = lambda par, u: np.tanh(par[:, 0]) + u + u**3  # noqa: E731
    u = bisect_inverse(f, np.array([[c]]), np.array([v]))
    assert abs(f(np.array([[c]]), u)[0] - v) < 1e-8


@pytest.mark.parametrize("tag", ["gaussian", "skewed", "mixture", "student_t"])
def test_noise_families_standardized(tag):
    fam = make_noise(tag)
    x = fam.sample(np.random.default_rng(0), 200_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.std() - 1) < 0.03
    grid = np.linspace(-30, 30, 60001)
    assert np.trapezoid(np.exp(fam.logpdf(grid)), grid) == pytest.approx(1.0, abs=2e-3)


def test_unknown_noise_rejected():
    with pytest.raises(ValueError):
        make_noise("cauchy")
