"""Synthetic SCM families, orientation ground truth and non-monotonicity scores.

Every non-root mechanism has the form

    v_i = tanh(w_i . c + b_i) + g_i(c) * (0.2 + softplus(a_i + e_i * tanh(w~_i . c))) * u_i

with ``c = v_{<i}`` and an orientation factor ``g_i``:

* ``global_monotone``: ``g = 1``
* ``threshold_flip`` / ``bridge``: ``g = sgn(omega_i . c - tau_i)``
* ``smooth_flip``: ``g = sgn(z) (eps + (1 - eps) |tanh(k z)|)``, ``z = omega_i . c - tau_i``

``omega_i`` is drawn uniformly from [-1, 1] and normalized to unit length.
Thresholds are the median score under ancestral sampling, except for the
bridge family whose thresholds are calibrated to a target flip rate.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .noise import ExogenousDistribution, HalfNormal, Uniform01, make_noise
from .scm import CounterfactualQuery, Intervention, Mechanism, TriangularScm, sgn

FAMILIES = ("global_monotone", "threshold_flip", "smooth_flip", "bridge")
NOISES = ("gaussian", "skewed", "mixture", "student_t")
SCALE_FLOOR = 0.2
SMOOTH_EPS = 0.1
SMOOTH_K = 4.0
N_CALIBRATION = 20_000


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class MechanismFamily:
    tag: str
    strength: Optional[float] = None

    def __post_init__(self):
        if self.tag not in FAMILIES:
            raise ValueError(f"unknown mechanism family {self.tag!r}")
        if (self.tag == "bridge") != (self.strength is not None):
            raise ValueError("strength is required for, and only for, the bridge family")
        if self.strength is not None and not 0.0 <= self.strength <= 1.0:
            raise ValueError("bridge strength must lie in [0, 1]")

    def label(self) -> str:
        return self.tag if self.strength is None else f"bridge@{self.strength:.2f}"


@dataclass(frozen=True)
class SweepConfig:
    family: MechanismFamily
    noise: str = "gaussian"
    d: int = 3
    n_train: int = 2000
    seed: int = 7

    def __post_init__(self):
        if isinstance(self.family, str):
            object.__setattr__(self, "family", MechanismFamily(self.family))
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise family {self.noise!r}")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if self.n_train < 1:
            raise ValueError("n_train must be positive")

    @property
    def n_test(self) -> int:
        return max(1000, self.n_train // 5)

    @property
    def n_cf(self) -> int:
        return max(500, self.n_train // 10)

    def to_dict(self) -> dict:
        return {
            "family": self.family.tag,
            "strength": self.family.strength,
            "noise": self.noise,
            "d": self.d,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_cf": self.n_cf,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepConfig":
        fam = MechanismFamily(data["family"], data.get("strength"))
        return cls(fam, data["noise"], int(data["d"]), int(data["n_train"]), int(data["seed"]))


@dataclass(frozen=True, eq=False)
class ZooMechanism:
    """Coefficients of one synthetic mechanism; methods are vectorized."""

    kind: str  # "monotone" | "threshold" | "smooth"
    w: np.ndarray
    b: float
    a: float
    e: float
    w_amp: np.ndarray
    omega: np.ndarray
    tau: float = 0.0

    def shift(self, c):
        return np.tanh(c @ self.w + self.b)

    def scale(self, c):
        return SCALE_FLOOR + softplus(self.a + self.e * np.tanh(c @ self.w_amp))

    def score(self, c):
        return c @ self.omega - self.tau

    def gate(self, c):
        if self.kind == "monotone" or self.omega.size == 0:
            return np.ones(c.shape[0])
        z = self.score(c)
        if self.kind == "threshold":
            return sgn(z)
        return sgn(z) * (SMOOTH_EPS + (1 - SMOOTH_EPS) * np.abs(np.tanh(SMOOTH_K * z)))

    def orientation(self, c):
        if self.kind == "monotone" or self.omega.size == 0:
            return np.ones(c.shape[0])
        return sgn(self.score(c))

    def forward(self, c, u):
        return self.shift(c) + self.gate(c) * self.scale(c) * u

    def inverse(self, c, v):
        return (v - self.shift(c)) / (self.gate(c) * self.scale(c))

    def partial_u(self, c, u):
        return self.gate(c) * self.scale(c) * np.ones_like(u)

    def with_tau(self, tau: float) -> "ZooMechanism":
        return ZooMechanism(self.kind, self.w, self.b, self.a, self.e, self.w_amp, self.omega, tau)

    def as_mechanism(self, index: int) -> Mechanism:
        return Mechanism(index, self.forward, self.inverse, self.partial_u, name=self.kind)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "w": self.w.tolist(),
            "b": self.b,
            "a": self.a,
            "e": self.e,
            "w_amp": self.w_amp.tolist(),
            "omega": self.omega.tolist(),
            "tau": self.tau,
        }


@dataclass(frozen=True)
class OrientationTruth:
    """Ground-truth orientation sign for every mechanism as a function of context."""

    mechanisms: tuple[ZooMechanism, ...]

    def sign(self, i: int, contexts: np.ndarray) -> np.ndarray:
        c = np.asarray(contexts, dtype=float).reshape(-1, i)
        return self.mechanisms[i].orientation(c)

    def matrix(self, v: np.ndarray) -> np.ndarray:
        """Signs of the non-root mechanisms at every row of ``v``; shape (n, d - 1)."""
        v = np.atleast_2d(v)
        d = v.shape[1]
        return np.column_stack([self.mechanisms[i].orientation(v[:, :i]) for i in range(1, d)])


def _draw_mechanism(rng: np.random.Generator, k: int, kind: str) -> ZooMechanism:
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)  # noqa: E731
    w, b, a, e, w_amp = u(k), float(u()), float(u()), float(u()), u(k)
    omega = u(k)
    norm = np.linalg.norm(omega)
    omega = omega / norm if norm > 0 else omega
    if k == 0:
        kind = "monotone"
    return ZooMechanism(kind, w, b, a, e, w_amp, omega)


def _kind_for(tag: str) -> str:
    return {"global_monotone": "monotone", "smooth_flip": "smooth"}.get(tag, "threshold")


def _ancestral_scores(
    mechs: list[ZooMechanism], noise: ExogenousDistribution, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Sample v_{<i} for i = len(mechs) with the mechanisms built so far."""
    u = noise.sample(rng, n)[:, : len(mechs)]
    v = np.empty_like(u)
    for j, m in enumerate(mechs):
        v[:, j] = m.forward(v[:, :j], u[:, j])
    return v


def _build(
    config: SweepConfig, flip_rate: Optional[float], n_cal: int = N_CALIBRATION
) -> tuple[TriangularScm, OrientationTruth]:
    ss = np.random.SeedSequence(config.seed)
    coef_seq, cal_seq = ss.spawn(2)
    coef_rng = np.random.default_rng(coef_seq)
    cal_rng = np.random.default_rng(cal_seq)
    noise = ExogenousDistribution.iid(config.noise, config.d)
    kind = _kind_for(config.family.tag)

    mechs: list[ZooMechanism] = []
    for i in range(config.d):
        m = _draw_mechanism(coef_rng, i, kind)
        if i > 0 and m.kind != "monotone":
            ctx = _ancestral_scores(mechs, noise, cal_rng, n_cal)
            score = ctx @ m.omega
            if np.ptp(score) <= 0:
                raise ValueError(f"degenerate context score for mechanism {i}")
            rate = 0.5 if flip_rate is None else flip_rate
            tau = -np.inf if rate <= 0 else float(np.quantile(score, rate))
            m = m.with_tau(tau)
        mechs.append(m)

    scm = TriangularScm(
        tuple(m.as_mechanism(i) for i, m in enumerate(mechs)),
        noise,
        name=f"{config.family.label()}/{config.noise}/d{config.d}",
    )
    return scm, OrientationTruth(tuple(mechs))


def make_scm(config: SweepConfig) -> tuple[TriangularScm, OrientationTruth]:
    """SCM of the configured family with reproducible coefficients."""
    rate = None
    if config.family.tag == "bridge":
        rate = config.family.strength / 2.0
    return _build(config, rate)


def calibrate_bridge(
    strength: float, d: int, seed: int, n_cal: int = N_CALIBRATION, noise: str = "gaussian"
) -> np.ndarray:
    """Thresholds giving each non-root mechanism a negative-direction rate of strength/2."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    if n_cal < 5000:
        raise ValueError("n_cal must be >= 5000")
    cfg = SweepConfig(MechanismFamily("bridge", strength), noise, d, 2000, seed)
    _, truth = _build(cfg, strength / 2.0, n_cal)
    return np.array([m.tau for m in truth.mechanisms[1:]])


def nms_synth(orientation: np.ndarray) -> float:
    """Mean over non-root mechanisms of 2 min(r_i, 1 - r_i)."""
    o = np.asarray(orientation, dtype=float)
    if o.size == 0:
        raise ValueError("empty orientation matrix")
    if o.ndim == 1:
        o = o[:, None]
    r = np.mean(o < 0, axis=0)
    return float(np.mean(2.0 * np.minimum(r, 1.0 - r)))


def nms_composite(flip_ratio: float, contact_ratio: float) -> float:
    for name, x in (("flip_ratio", flip_ratio), ("contact_ratio", contact_ratio)):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {x}")
    return flip_ratio * contact_ratio


# --------------------------------------------------------------------------
# counterexample pair and hidden-phase demo


def make_counterexample_pair() -> tuple[TriangularScm, TriangularScm]:
    """M: X = U_X, Y = sgn(X) U_Y  versus  M': X = U_X, Y = U_Y (standard gaussians)."""
    ident = Mechanism(0, lambda c, u: u.copy(), lambda c, v: v.copy(), lambda c, u: np.ones_like(u), "id")
    flip = Mechanism(
        1,
        lambda c, u: sgn(c[:, 0]) * u,
        lambda c, v: sgn(c[:, 0]) * v,
        lambda c, u: sgn(c[:, 0]) * np.ones_like(u),
        "sgn(x)*u",
    )
    plain = Mechanism(1, lambda c, u: u.copy(), lambda c, v: v.copy(), lambda c, u: np.ones_like(u), "u")
    noise = ExogenousDistribution.iid("gaussian", 2)
    m = TriangularScm((ident, flip), noise, name="M")
    m_prime = TriangularScm((ident, plain), noise, name="M'")
    return m, m_prime


@dataclass(frozen=True)
class HiddenPhaseScm:
    """X = U_X, S = 1[U_S <= sigma(X)], Y = (2S - 1) U_Y with U_Y > 0 and U_S latent."""

    slope: float

    def sigma(self, x):
        return special.expit(self.slope * np.asarray(x, dtype=float))

    def sample(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        x = rng.standard_normal(n)
        u_s = Uniform01().sample(rng, n)
        u_y = HalfNormal().sample(rng, n)
        s = (u_s <= self.sigma(x)).astype(float)
        return {"x": x, "u_s": u_s, "u_y": u_y, "s": s, "y": (2 * s - 1) * u_y}

    def counterfactual(self, x: float, y: float, x_new: float, u_s: np.ndarray) -> np.ndarray:
        """CF outcome for each latent phase draw ``u_s`` consistent with (x, y)."""
        u_s = np.asarray(u_s, dtype=float)
        s_fact = y > 0
        consistent = (u_s <= self.sigma(x)) == s_fact
        if not np.all(consistent):
            raise ValueError("u_s draws inconsistent with the factual phase")
        s_new = u_s <= self.sigma(x_new)
        return np.where(s_new, abs(y), -abs(y))

    def posterior_grid(self, x: float, y: float, n: int = 101) -> np.ndarray:
        """Evenly spaced U_S values consistent with the observed phase."""
        cut = float(self.sigma(x))
        lo, hi = (0.0, cut) if y > 0 else (cut, 1.0)
        eps = 1e-9 * (hi - lo)
        return np.linspace(lo + eps, hi - eps, n)


@dataclass(frozen=True)
class SegmentedMonotoneSurrogate:
    """Per-X-segment monotone quantile transport fitted on observed (X, Y)."""

    edges: np.ndarray
    sorted_y: tuple[np.ndarray, ...]
    x_pool: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, n_segments: int = 10) -> "SegmentedMonotoneSurrogate":
        edges = np.quantile(x, np.linspace(0, 1, n_segments + 1)[1:-1])
        seg = np.searchsorted(edges, x)
        return cls(edges, tuple(np.sort(y[seg == k]) for k in range(n_segments)), np.asarray(x))

    def _segment(self, x) -> np.ndarray:
        return np.searchsorted(self.edges, np.atleast_1d(x))

    def quantile(self, x, p) -> np.ndarray:
        seg = self._segment(x)
        p = np.broadcast_to(np.asarray(p, dtype=float), seg.shape)
        return np.array([np.quantile(self.sorted_y[k], pk) for k, pk in zip(seg, p)])

    def cdf(self, x, y) -> np.ndarray:
        seg = self._segment(x)
        y = np.broadcast_to(np.asarray(y, dtype=float), seg.shape)
        out = []
        for k, yk in zip(seg, y):
            ys = self.sorted_y[k]
            out.append(np.searchsorted(ys, yk, side="right") / ys.size)
        return np.clip(np.array(out), 0.0, 1.0)

    def sample(self, rng: np.random.Generator, n: int) -> dict[str, np.ndarray]:
        x = rng.choice(self.x_pool, size=n, replace=True)
        seg = self._segment(x)
        y = np.empty(n)
        p = rng.random(n)
        for k in np.unique(seg):
            idx = seg == k
            y[idx] = np.quantile(self.sorted_y[k], p[idx])
        return {"x": x, "y": y}

    def counterfactual(self, x: float, y: float, x_new: float) -> float:
        level = float(self.cdf(x, y)[0])
        return float(self.quantile(x_new, level)[0])


@dataclass(frozen=True)
class HiddenPhaseDemo:
    scm: HiddenPhaseScm
    surrogate: SegmentedMonotoneSurrogate


def make_hidden_phase_scm(sigma_slope: float, n_fit: int = 20_000, seed: int = 0) -> HiddenPhaseDemo:
    scm = HiddenPhaseScm(sigma_slope)
    data = scm.sample(np.random.default_rng(seed), n_fit)
    return HiddenPhaseDemo(scm, SegmentedMonotoneSurrogate.fit(data["x"], data["y"]))


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    v_train: np.ndarray
    v_test: np.ndarray
    u_train: np.ndarray
    u_test: np.ndarray
    orientation_test: np.ndarray
    cf_queries: tuple[CounterfactualQuery, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.v_train.shape[1]

    def save(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        _write_split_csv(out / "data.csv", self.v_train, self.v_test, "v")
        _write_split_csv(out / "latents.csv", self.u_train, self.u_test, "u")
        np.savetxt(out / "orientation_test.csv", self.orientation_test, fmt="%d", delimiter=",")
        queries = [
            {
                "factual": q.factual.tolist(),
                "targets": list(q.intervention.targets),
                "values": list(q.intervention.values),
                "truth_cf": None if q.truth_cf is None else q.truth_cf.tolist(),
            }
            for q in self.cf_queries
        ]
        (out / "queries.json").write_text(json.dumps(queries, indent=1))
        (out / "metadata.json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetBundle":
        src = Path(directory)
        v_train, v_test = _read_split_csv(src / "data.csv")
        u_train, u_test = _read_split_csv(src / "latents.csv")
        orient = np.loadtxt(src / "orientation_test.csv", delimiter=",", ndmin=2)
        queries = tuple(
            CounterfactualQuery(
                np.array(q["factual"]),
                Intervention(tuple(q["targets"]), tuple(q["values"])),
                None if q["truth_cf"] is None else np.array(q["truth_cf"]),
            )
            for q in json.loads((src / "queries.json").read_text())
        )
        meta = json.loads((src / "metadata.json").read_text())
        return cls(v_train, v_test, u_train, u_test, orient, queries, meta)


def _write_split_csv(path: Path, train: np.ndarray, test: np.ndarray, prefix: str) -> None:
    d = train.shape[1]
    header = "split," + ",".join(f"{prefix}{j}" for j in range(d))
    lines = [header]
    for split, arr in (("train", train), ("test", test)):
        lines.extend(split + "," + ",".join(repr(float(x)) for x in row) for row in arr)
    path.write_text("\n".join(lines) + "\n")


def _read_split_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rows = path.read_text().strip().splitlines()[1:]
    train, test = [], []
    for line in rows:
        split, *vals = line.split(",")
        (train if split == "train" else test).append([float(x) for x in vals])
    return np.array(train), np.array(test)


def sample_dataset(
    scm: TriangularScm, truth: OrientationTruth, config: SweepConfig
) -> DatasetBundle:
    """Train/test samples plus single-target counterfactual queries with exact answers.

    Query factuals are the first ``n_cf`` test rows.  The intervened coordinate
    is uniform over the variables that have descendants (intervening on the
    last variable changes nothing downstream); its value is drawn from that
    coordinate's empirical training marginal.
    """
    ss = np.random.SeedSequence([config.seed, 1])
    rng_train, rng_test, rng_q = (np.random.default_rng(s) for s in ss.spawn(3))
    v_train, u_train = scm.sample(rng_train, config.n_train)
    v_test, u_test = scm.sample(rng_test, config.n_test)
    orient = truth.matrix(v_test)

    d = scm.d
    targets = rng_q.integers(0, d - 1, size=config.n_cf)
    donors = rng_q.integers(0, config.n_train, size=config.n_cf)
    queries = []
    for k in range(config.n_cf):
        t = int(targets[k])
        iv = Intervention((t,), (float(v_train[donors[k], t]),))
        q = CounterfactualQuery(v_test[k], iv)
        queries.append(CounterfactualQuery(q.factual, iv, scm.counterfactual(q)))

    meta = config.to_dict()
    meta.update(
        {
            "nms_synth": nms_synth(orient),
            "noise_tags": list(scm.noise.tags),
            "mechanisms": [m.to_json() for m in truth.mechanisms],
            "query_protocol": "single-target do, target uniform over non-sink variables, value from train marginal",
            "functional_forms": "artifact choice (tanh shift, floored softplus scale, sign gate)",
        }
    )
    return DatasetBundle(v_train, v_test, u_train, u_test, orient, tuple(queries), meta)
