"""Exact triangular SCMs: solve, abduct, intervene, counterfactual, likelihood.

All array operations accept either a single vector of length ``d`` or a
batch of shape ``(n, d)`` and return the same layout.  Mechanisms are
vectorized: ``forward(parents, u)`` receives ``parents`` of shape ``(n, k)``
(the values of the variables earlier in the causal order) and ``u`` of shape
``(n,)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats as sps

from .noise import ExogenousDistribution

BISECT_LO = -50.0
BISECT_HI = 50.0
BISECT_TOL = 1e-12
FD_STEP = 1e-6

MechFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class InversionError(RuntimeError):
    """A mechanism could not be inverted at some context."""


def sgn(x: np.ndarray) -> np.ndarray:
    """Sign with sgn(0) = +1, keeping sign-gated mechanisms bijective at 0."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


@dataclass(frozen=True)
class Mechanism:
    index: int
    forward: MechFn
    inverse: Optional[MechFn] = None
    partial_u: Optional[MechFn] = None
    name: str = ""

    def __call__(self, parents: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.forward(parents, u)

    def invert(self, parents: np.ndarray, v: np.ndarray) -> np.ndarray:
        if self.inverse is not None:
            return self.inverse(parents, v)
        return bisect_inverse(self.forward, parents, v)

    def derivative(self, parents: np.ndarray, u: np.ndarray) -> np.ndarray:
        if self.partial_u is not None:
            return self.partial_u(parents, u)
        h = FD_STEP
        return (self.forward(parents, u + h) - self.forward(parents, u - h)) / (2 * h)


def bisect_inverse(f: MechFn, parents: np.ndarray, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    lo = np.full(n, BISECT_LO)
    hi = np.full(n, BISECT_HI)
    f_lo = f(parents, lo) - v
    f_hi = f(parents, hi) - v
    if np.any(f_lo * f_hi > 0):
        bad = int(np.flatnonzero(f_lo * f_hi > 0)[0])
        raise InversionError(f"bisection bracket failed at row {bad}")
    increasing = f_hi >= f_lo
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = f(parents, mid) - v
        go_right = np.where(increasing, f_mid < 0, f_mid > 0)
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
        if np.max(hi - lo) < BISECT_TOL:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class CausalOrder:
    permutation: tuple[int, ...]

    def __post_init__(self):
        p = tuple(int(i) for i in self.permutation)
        if sorted(p) != list(range(len(p))):
            raise ValueError(f"causal order {p} is not a permutation of 0..{len(p) - 1}")
        object.__setattr__(self, "permutation", p)

    @classmethod
    def identity(cls, d: int) -> "CausalOrder":
        return cls(tuple(range(d)))

    def __len__(self) -> int:
        return len(self.permutation)

    def parents_of(self, var: int) -> tuple[int, ...]:
        pos = self.permutation.index(var)
        return self.permutation[:pos]


@dataclass(frozen=True)
class Intervention:
    targets: tuple[int, ...] = ()
    values: tuple[float, ...] = ()

    def __post_init__(self):
        t = tuple(int(i) for i in self.targets)
        v = tuple(float(x) for x in self.values)
        if len(t) != len(v):
            raise ValueError("targets and values differ in length")
        if len(set(t)) != len(t):
            raise ValueError("duplicate intervention targets")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def do(cls, **assignments: float) -> "Intervention":
        # do(v0=1.0, v2=-3) style helper
        items = sorted((int(k.lstrip("v")), val) for k, val in assignments.items())
        return cls(tuple(k for k, _ in items), tuple(v for _, v in items))

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.targets, self.values))

    def validate(self, d: int) -> None:
        if any(t < 0 or t >= d for t in self.targets):
            raise ValueError(f"intervention targets {self.targets} outside 0..{d - 1}")


@dataclass(frozen=True, eq=False)
class CounterfactualQuery:
    factual: np.ndarray
    intervention: Intervention = field(default_factory=Intervention)
    truth_cf: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "factual", np.asarray(self.factual, dtype=float))
        if self.truth_cf is not None:
            object.__setattr__(self, "truth_cf", np.asarray(self.truth_cf, dtype=float))


def _as_batch(x: np.ndarray, d: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != d:
        raise ValueError(f"expected dimension {d}, got {a.shape[1]}")
    return a, single


@dataclass(frozen=True)
class TriangularScm:
    mechanisms: tuple[Mechanism, ...]
    noise: ExogenousDistribution
    order: CausalOrder = None  # type: ignore[assignment]
    name: str = ""

    def __post_init__(self):
        mechs = tuple(self.mechanisms)
        object.__setattr__(self, "mechanisms", mechs)
        if self.order is None:
            object.__setattr__(self, "order", CausalOrder.identity(len(mechs)))
        if len(self.order) != len(mechs) or self.noise.d != len(mechs):
            raise ValueError("order, mechanisms and noise must share dimension d")

    @property
    def d(self) -> int:
        return len(self.mechanisms)

    def sample_u(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.noise.sample(rng, n)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        u = self.sample_u(rng, n)
        return self.solve(u), u

    def _run(self, u: np.ndarray, clamp: dict[int, float]) -> np.ndarray:
        v = np.empty_like(u)
        for var in self.order.permutation:
            if var in clamp:
                v[:, var] = clamp[var]
                continue
            parents = v[:, list(self.order.parents_of(var))]
            v[:, var] = self.mechanisms[var].forward(parents, u[:, var])
        return v

    def solve(self, u: np.ndarray) -> np.ndarray:
        ub, single = _as_batch(u, self.d)
        v = self._run(ub, {})
        return v[0] if single else v

    def abduct(self, v: np.ndarray) -> np.ndarray:
        vb, single = _as_batch(v, self.d)
        u = np.empty_like(vb)
        for var in self.order.permutation:
            parents = vb[:, list(self.order.parents_of(var))]
            u[:, var] = self.mechanisms[var].invert(parents, vb[:, var])
        return u[0] if single else u

    def intervene_sample(self, intervention: Intervention, u: np.ndarray) -> np.ndarray:
        intervention.validate(self.d)
        ub, single = _as_batch(u, self.d)
        v = self._run(ub, intervention.as_dict())
        return v[0] if single else v

    def counterfactual(self, q: CounterfactualQuery) -> np.ndarray:
        u_star = self.abduct(q.factual)
        return self.intervene_sample(q.intervention, u_star)

    def log_likelihood(self, v: np.ndarray) -> np.ndarray | float:
        vb, single = _as_batch(v, self.d)
        u = self.abduct(vb)
        logp = self.noise.log_density(u).sum(axis=1)
        for var in self.order.permutation:
            parents = vb[:, list(self.order.parents_of(var))]
            deriv = self.mechanisms[var].derivative(parents, u[:, var])
            if np.any(deriv == 0):
                raise InversionError(f"zero u-derivative in mechanism {var}")
            logp = logp - np.log(np.abs(deriv))
        return float(logp[0]) if single else logp

    def parents(self, v: np.ndarray, var: int) -> np.ndarray:
        return np.atleast_2d(v)[:, list(self.order.parents_of(var))]


# module-level aliases mirroring the operation names
def solve(scm: TriangularScm, u: np.ndarray) -> np.ndarray:
    return scm.solve(u)


def abduct(scm: TriangularScm, v: np.ndarray) -> np.ndarray:
    return scm.abduct(v)


def counterfactual(scm: TriangularScm, q: CounterfactualQuery) -> np.ndarray:
    return scm.counterfactual(q)


def intervene_sample(scm: TriangularScm, intervention: Intervention, u: np.ndarray) -> np.ndarray:
    return scm.intervene_sample(intervention, u)


def log_likelihood(scm: TriangularScm, v: np.ndarray):
    return scm.log_likelihood(v)


@dataclass(frozen=True)
class Bijection:
    """Strictly monotone scalar map with its inverse and derivative."""

    fn: Callable[[np.ndarray], np.ndarray]
    inv: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def __call__(self, x):
        return self.fn(x)


def _relabelled(mech: Mechanism, psi: Bijection) -> Mechanism:
    def forward(parents, u2):
        return mech.forward(parents, psi.inv(u2))

    def inverse(parents, v):
        return psi.fn(mech.invert(parents, v))

    def partial_u(parents, u2):
        u = psi.inv(u2)
        return mech.derivative(parents, u) / psi.deriv(u)

    return Mechanism(mech.index, forward, inverse, partial_u, name=f"{mech.name}∘{psi.name}^-1")


def exogenous_isomorph(scm: TriangularScm, psis: Sequence[Bijection]) -> TriangularScm:
    """Model with exogenous coordinates relabelled by ``psi``.

    ``f'_i(c, psi_i(u)) = f_i(c, u)`` and ``P_U' = psi_# P_U``, so the result
    is exogenously isomorphic to ``scm`` by construction.
    """
    from .noise import Pushforward

    if len(psis) != scm.d:
        raise ValueError("need one bijection per coordinate")
    mechs = tuple(_relabelled(m, p) for m, p in zip(scm.mechanisms, psis))
    fams = tuple(
        Pushforward(f, p.fn, p.inv, p.deriv) for f, p in zip(scm.noise.families, psis)
    )
    return TriangularScm(mechs, ExogenousDistribution(fams), scm.order, name=f"EI({scm.name})")


def _check_pair(a: TriangularScm, b: TriangularScm) -> None:
    if a.d != b.d or a.order != b.order:
        raise ValueError("models must share causal order and dimension")


def inverse_transport(
    a: TriangularScm, b: TriangularScm, i: int, context: Sequence[float] | np.ndarray, u
) -> np.ndarray:
    """``b_i(context, .)^{-1}`` composed with ``a_i(context, .)`` evaluated at ``u``."""
    _check_pair(a, b)
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    ctx = np.asarray(context, dtype=float).reshape(1, -1)
    parents = np.repeat(ctx, u_arr.size, axis=0)
    v = a.mechanisms[i].forward(parents, u_arr)
    out = b.mechanisms[i].invert(parents, v)
    return out if np.ndim(u) else float(out[0])


def transport_variation(
    a: TriangularScm,
    b: TriangularScm,
    i: int,
    contexts: Sequence[Sequence[float]],
    u_grid: Sequence[float],
) -> float:
    """Max over the grid of the spread of the inverse transport across contexts."""
    if len(contexts) < 2:
        raise ValueError("need at least 2 contexts")
    grid = np.asarray(u_grid, dtype=float)
    values = np.stack([inverse_transport(a, b, i, c, grid) for c in contexts])
    return float(np.max(values.max(axis=0) - values.min(axis=0)))


def ks_critical_value(n: int, m: int, alpha: float = 0.01) -> float:
    c_alpha = np.sqrt(-np.log(alpha / 2.0) / 2.0)
    return float(c_alpha * np.sqrt((n + m) / (n * m)))


@dataclass(frozen=True)
class EquivalenceReport:
    ks_marginals: list[float]
    critical: float
    passed: bool

    @property
    def pass_(self) -> bool:
        return self.passed


def observational_equivalence_check(
    a: TriangularScm, b: TriangularScm, n: int = 10_000, seed: int = 0, alpha: float = 0.01
) -> EquivalenceReport:
    if n < 1000:
        raise ValueError("n must be >= 1000 for the asymptotic KS critical value")
    rng_a, rng_b = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    va, _ = a.sample(rng_a, n)
    vb, _ = b.sample(rng_b, n)
    ks = [float(sps.ks_2samp(va[:, j], vb[:, j]).statistic) for j in range(a.d)]
    crit = ks_critical_value(n, n, alpha)
    return EquivalenceReport(ks, crit, all(s < crit for s in ks))
