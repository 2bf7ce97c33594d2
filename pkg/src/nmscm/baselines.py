"""Globally monotone comparison models and the shared evaluation metrics.

* ``AnmModel``: additive noise, ``v_i = g(c) + u_i`` with ``g`` least squares on features.
* ``TmScmQuantile``: the inverter with every gate frozen to +1, trained by likelihood only.
* ``ContextualFlow``: ``v_i = m(c) + exp(a(c)) u_i`` with ``m`` and ``a`` linear in features.

All implement ``fit``-style constructors, ``abduct`` and ``predict_counterfactual``
through ``TriangularModel``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats as sps

from .flow import FeatureMap
from .inverter import (
    Adam,
    InverterModel,
    LossTrace,
    TrainConfig,
    TrainingDivergence,
    TriangularModel,
    train,
)

RIDGE = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _training_data(data) -> np.ndarray:
    return np.asarray(getattr(data, "v_train", data), dtype=float)


# --------------------------------------------------------------------------
# additive noise model


class AnmModel(TriangularModel):
    def __init__(self, d: int, weights: list, residual_scale: np.ndarray, basis_seed: int = 0):
        self.d = d
        self.basis_seed = basis_seed
        self.features = [FeatureMap.create(i, basis_seed) for i in range(d)]
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.residual_scale = np.asarray(residual_scale, dtype=float)

    def regression(self, i: int, contexts: np.ndarray) -> np.ndarray:
        return self.features[i](contexts) @ self.weights[i]

    def mech_forward(self, i, contexts, u):
        return self.regression(i, contexts) + u

    def mech_inverse(self, i, contexts, v):
        return v - self.regression(i, contexts)

    def to_json(self) -> dict:
        return {
            "kind": "anm",
            "d": self.d,
            "basis_seed": self.basis_seed,
            "weights": [w.tolist() for w in self.weights],
            "residual_scale": self.residual_scale.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AnmModel":
        return cls(doc["d"], doc["weights"], doc["residual_scale"], doc["basis_seed"])


def least_squares(phi: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Normal equations, with a 1e-6 ridge if they are singular."""
    gram = phi.T @ phi
    rhs = phi.T @ target
    try:
        np.linalg.cholesky(gram)
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.solve(gram + RIDGE * np.eye(gram.shape[0]), rhs)


def fit_anm(data, basis_seed: int = 0) -> AnmModel:
    v = _training_data(data)
    d = v.shape[1]
    weights, scales = [], []
    for i in range(d):
        phi = FeatureMap.create(i, basis_seed)(v[:, :i])
        w = least_squares(phi, v[:, i])
        weights.append(w)
        scales.append(float(np.std(v[:, i] - phi @ w)))
    return AnmModel(d, weights, np.array(scales), basis_seed)


# --------------------------------------------------------------------------
# gate-frozen inverter


class TmScmQuantile(InverterModel):
    """Monotone triangular transport: the inverter with all gates fixed at +1."""

    def __init__(self, d: int, basis_seed: int = 0, gate_frozen: bool = True, theta=None):
        super().__init__(d, basis_seed, True, theta)

    def to_json(self, config: Optional[dict] = None) -> dict:
        doc = super().to_json(config)
        doc["kind"] = "tmscm_quantile"
        doc["reading"] = "gate-frozen monotone flow trained by likelihood"
        return doc


def tmscm_config(cfg: TrainConfig) -> TrainConfig:
    kw = asdict(cfg)
    kw.update(lambda_tr=0.0, lambda_ori=0.0)
    return TrainConfig(**kw)


def fit_tmscm(data, cfg: TrainConfig = TrainConfig(), basis_seed: int = 0):
    v = _training_data(data)
    model, trace = train(TmScmQuantile(v.shape[1], basis_seed), v, tmscm_config(cfg))
    return model, trace


# --------------------------------------------------------------------------
# affine contextual flow


class ContextualFlow(TriangularModel):
    """``v_i = m(c) + exp(a(c)) u_i``; parameters in one flat vector."""

    def __init__(self, d: int, basis_seed: int = 0, theta=None):
        self.d = d
        self.basis_seed = basis_seed
        self.features = [FeatureMap.create(i, basis_seed) for i in range(d)]
        self._offsets = np.cumsum([0] + [2 * f.dim for f in self.features])
        self.n_params = int(self._offsets[-1])
        self.theta = np.zeros(self.n_params) if theta is None else np.asarray(theta, dtype=float)

    def views(self, i: int):
        p = self.features[i].dim
        block = self.theta[self._offsets[i]: self._offsets[i + 1]]
        return block[:p], block[p:]

    def location_scale(self, i: int, contexts: np.ndarray):
        phi = self.features[i](contexts)
        m_w, a_w = self.views(i)
        return phi @ m_w, phi @ a_w

    def mech_forward(self, i, contexts, u):
        m, a = self.location_scale(i, contexts)
        return m + np.exp(a) * u

    def mech_inverse(self, i, contexts, v):
        m, a = self.location_scale(i, contexts)
        return (v - m) * np.exp(-a)

    def nll_and_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        n = v.shape[0]
        grad = np.zeros(self.n_params)
        total = 0.0
        for i in range(self.d):
            phi = self.features[i](v[:, :i])
            m_w, a_w = self.views(i)
            a = phi @ a_w
            u = (v[:, i] - phi @ m_w) * np.exp(-a)
            total += float(np.sum(0.5 * u * u + _HALF_LOG_2PI + a))
            p = phi.shape[1]
            lo = self._offsets[i]
            grad[lo: lo + p] = phi.T @ (-u * np.exp(-a)) / n
            grad[lo + p: lo + 2 * p] = phi.T @ (1.0 - u * u) / n
        return total / n, grad

    def to_json(self) -> dict:
        return {"kind": "contextual_flow", "d": self.d, "basis_seed": self.basis_seed,
                "theta": self.theta.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "ContextualFlow":
        return cls(doc["d"], doc["basis_seed"], doc["theta"])


def fit_contextual_flow(data, cfg: TrainConfig = TrainConfig(), basis_seed: int = 0):
    """Maximum likelihood with the same Adam schedule as the inverter."""
    v = _training_data(data)
    n = v.shape[0]
    model = ContextualFlow(v.shape[1], basis_seed)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.n_params, cfg.lr)
    trace = LossTrace()
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps + 1):
        batch = v[rng.choice(n, size=bs, replace=False)]
        loss, grad = model.nll_and_grad(batch)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDivergence(f"contextual flow diverged at step {step}")
        if step % cfg.trace_every == 0 or step == cfg.steps:
            trace.append({"step": step, "total": loss, "nll": loss, "cycle": 0.0, "transport": 0.0,
                          "orientation": 0.0, "smooth": 0.0, "nll_hard": loss, "gate_gap": 0.0})
        if step == cfg.steps:
            break
        if cfg.lr_schedule == "cosine":
            opt.lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
        model.theta = opt.step(model.theta, grad)
    return model, trace


# --------------------------------------------------------------------------
# metrics


def counterfactual_errors(model: TriangularModel, bundle) -> np.ndarray:
    """Squared errors over the non-intervened coordinates of every query, flattened."""
    queries = bundle.cf_queries
    pred = model.predict_counterfactuals(queries)
    truth = np.array([q.truth_cf for q in queries])
    keep = np.ones(truth.shape, dtype=bool)
    for k, q in enumerate(queries):
        keep[k, list(q.intervention.targets)] = False
    return ((pred - truth) ** 2)[keep]


def cf_mse(model: TriangularModel, bundle) -> float:
    return float(np.mean(counterfactual_errors(model, bundle)))


def per_query_cf_error(model: TriangularModel, bundle) -> np.ndarray:
    """Mean squared error of each query over its non-intervened coordinates."""
    queries = bundle.cf_queries
    pred = model.predict_counterfactuals(queries)
    truth = np.array([q.truth_cf for q in queries])
    keep = np.ones(truth.shape, dtype=bool)
    for k, q in enumerate(queries):
        keep[k, list(q.intervention.targets)] = False
    return np.sum(((pred - truth) ** 2) * keep, axis=1) / keep.sum(axis=1)


def monotone_alignment(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Map ``estimate`` onto the values of ``truth`` by rank, after choosing the sign
    that maximizes rank correlation."""
    rho = sps.spearmanr(estimate, truth)[0]
    oriented = estimate if not (rho < 0) else -estimate
    order = np.argsort(np.argsort(oriented, kind="stable"), kind="stable")
    return np.sort(truth)[order]


def latent_recovery_error(model: TriangularModel, bundle) -> float:
    u_hat = np.atleast_2d(model.abduct(bundle.v_test))
    u = np.atleast_2d(bundle.u_test)
    errs = [np.mean((monotone_alignment(u_hat[:, j], u[:, j]) - u[:, j]) ** 2) for j in range(u.shape[1])]
    return float(np.mean(errs))


def direction_accuracy_of(model: TriangularModel, bundle) -> float:
    """Gauge-aligned direction accuracy; models without gates count as all +1."""
    gates_fn = getattr(model, "hard_gates", None)
    v = np.atleast_2d(bundle.v_test)
    truth = np.asarray(bundle.orientation_test).reshape(v.shape[0], -1)
    gates = gates_fn(v) if gates_fn is not None else np.ones_like(truth)
    agree = np.mean(gates == truth, axis=0)
    return float(np.mean(np.maximum(agree, 1.0 - agree)))


# --------------------------------------------------------------------------
# checkpoints


def save_model(model: TriangularModel, path: str | Path, config: Optional[dict] = None) -> None:
    if isinstance(model, InverterModel):
        doc = model.to_json(config)
    else:
        doc = model.to_json()
        doc["config"] = config or {}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path: str | Path) -> TriangularModel:
    doc = json.loads(Path(path).read_text())
    kind = doc["kind"]
    if kind == "anm":
        return AnmModel.from_json(doc)
    if kind == "contextual_flow":
        return ContextualFlow.from_json(doc)
    model = InverterModel.from_json(doc)
    if kind == "tmscm_quantile":
        return TmScmQuantile(model.d, model.basis_seed, theta=model.theta)
    return model
