import numpy as np
import pytest

from nmscm.baselines import (
    AnmModel,
    ContextualFlow,
    TmScmQuantile,
    cf_mse,
    direction_accuracy_of,
    fit_anm,
    fit_contextual_flow,
    fit_tmscm,
    latent_recovery_error,
    least_squares,
    load_model,
    monotone_alignment,
    per_query_cf_error,
    save_model,
)
from nmscm.inverter import InverterModel, OracleInverter, TrainConfig
from nmscm.zoo import SweepConfig, make_scm, sample_dataset


@pytest.fixture(scope="module")
def additive_bundle():
    cfg = SweepConfig("global_monotone", "gaussian", 3, 3000, 2)
    scm, truth = make_scm(cfg)
    return sample_dataset(scm, truth, cfg), scm, truth


def test_least_squares_matches_lstsq():
    rng = np.random.default_rng(0)
    phi = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    np.testing.assert_allclose(least_squares(phi, y), np.linalg.lstsq(phi, y, rcond=None)[0], atol=1e-10)


def test_least_squares_singular_falls_back_to_ridge():
    phi = np.ones((10, 2))
    w = least_squares(phi, np.full(10, 3.0))
    assert np.all(np.isfinite(w))
    assert phi[0] @ w == pytest.approx(3.0, rel=1e-4)


def test_anm_recovers_additive_mechanism():
    rng = np.random.default_rng(1)
    x = rng.normal(size=4000)
    y = 0.5 * x + 0.3 * x**2 + 0.1 * rng.normal(size=4000)
    model = fit_anm(np.column_stack([x, y]))
    u = model.abduct(np.column_stack([x, y]))
    assert np.std(u[:, 1]) == pytest.approx(0.1, rel=0.05)
    assert model.residual_scale[1] == pytest.approx(0.1, rel=0.05)


def test_anm_exact_round_trip(additive_bundle):
    bundle, _, _ = additive_bundle
    model = fit_anm(bundle)
    np.testing.assert_allclose(model.forward(model.abduct(bundle.v_test)), bundle.v_test, atol=1e-12)


def test_contextual_flow_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    model = ContextualFlow(3, theta=0.1 * rng.normal(size=ContextualFlow(3).n_params))
    v = rng.normal(size=(40, 3))
    _, grad = model.nll_and_grad(v)
    h = 1e-6
    for k in rng.choice(model.n_params, 20, replace=False):
        tp, tm = model.theta.copy(), model.theta.copy()
        tp[k] += h
        tm[k] -= h
        num = (ContextualFlow(3, theta=tp).nll_and_grad(v)[0] - ContextualFlow(3, theta=tm).nll_and_grad(v)[0]) / (2 * h)
        assert grad[k] == pytest.approx(num, abs=1e-7, rel=1e-5)


def test_contextual_flow_fits_heteroscedastic_gaussian():
    rng = np.random.default_rng(3)
    x = rng.normal(size=5000)
    y = np.tanh(x) + np.exp(0.3 * x) * rng.normal(size=5000)
    model, trace = fit_contextual_flow(np.column_stack([x, y]), TrainConfig(steps=600))
    u = model.abduct(np.column_stack([x, y]))[:, 1]
    assert abs(np.std(u) - 1) < 0.05
    assert trace.column("nll")[-1] < trace.column("nll")[0]


def test_tmscm_keeps_gates_frozen(additive_bundle):
    bundle, _, _ = additive_bundle
    model, _ = fit_tmscm(bundle, TrainConfig(steps=40))
    assert isinstance(model, TmScmQuantile)
    assert np.all(model.hard_gates(bundle.v_test) == 1)
    assert np.all(model.theta[model.slice_of(1, "gate")] == 0)


def test_oracle_metrics_are_perfect():
    cfg = SweepConfig("threshold_flip", "mixture", 3, 1000, 4)
    scm, truth = make_scm(cfg)
    bundle = sample_dataset(scm, truth, cfg)
    oracle = OracleInverter(truth.mechanisms)
    assert cf_mse(oracle, bundle) < 1e-18
    assert latent_recovery_error(oracle, bundle) < 1e-18
    assert direction_accuracy_of(oracle, bundle) == 1.0
    assert np.all(per_query_cf_error(oracle, bundle) < 1e-18)


def test_cf_mse_ignores_intervened_coordinate():
    cfg = SweepConfig("smooth_flip", "gaussian", 3, 1000, 4)
    scm, truth = make_scm(cfg)
    bundle = sample_dataset(scm, truth, cfg)
    oracle = OracleInverter(truth.mechanisms)
    errs = per_query_cf_error(oracle, bundle)
    assert np.mean(errs) == pytest.approx(cf_mse(oracle, bundle), abs=1e-18)


def test_monotone_alignment_handles_reversal():
    truth = np.random.default_rng(5).normal(size=100)
    np.testing.assert_allclose(monotone_alignment(-3 * truth + 1, truth), truth)
    np.testing.assert_allclose(monotone_alignment(np.exp(truth), truth), truth)


def test_monotone_direction_accuracy_counts_plus_one():
    cfg = SweepConfig("threshold_flip", "gaussian", 3, 500, 5)
    scm, truth = make_scm(cfg)
    bundle = sample_dataset(scm, truth, cfg)
    anm = fit_anm(bundle)
    t = np.asarray(bundle.orientation_test)
    expected = np.mean(np.maximum(np.mean(t == 1, axis=0), np.mean(t == -1, axis=0)))
    assert direction_accuracy_of(anm, bundle) == pytest.approx(expected)


@pytest.mark.parametrize("kind", ["anm", "contextual_flow", "inverter", "tmscm_quantile"])
def test_checkpoint_round_trip(tmp_path, kind):
    rng = np.random.default_rng(6)
    v = rng.normal(size=(200, 3))
    if kind == "anm":
        model = fit_anm(v)
    elif kind == "contextual_flow":
        model = ContextualFlow(3, theta=0.1 * rng.normal(size=ContextualFlow(3).n_params))
    elif kind == "inverter":
        model = InverterModel.random(3, rng)
    else:
        model = TmScmQuantile(3, theta=0.1 * rng.normal(size=InverterModel(3).n_params))
    save_model(model, tmp_path / "m.json", {"kind": kind})
    again = load_model(tmp_path / "m.json")
    assert type(again) is type(model)
    np.testing.assert_array_equal(again.abduct(v), model.abduct(v))


def test_anm_json_fields():
    doc = fit_anm(np.random.default_rng(7).normal(size=(50, 2))).to_json()
    assert doc["kind"] == "anm"
    assert isinstance(AnmModel.from_json(doc), AnmModel)
