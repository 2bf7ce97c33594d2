"""Standardized exogenous noise families.

Every family has mean 0 and variance 1 so mechanisms see comparable inputs
whatever the noise tag.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps

_LOG_2PI = math.log(2.0 * math.pi)
_MIX_SCALE = 1.0 / math.sqrt(1.25)
_T_DF = 5.0
_T_SCALE = math.sqrt(3.0 / 5.0)


class NoiseFamily:
    tag: str = ""

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Gaussian(NoiseFamily):
    tag = "gaussian"

    def sample(self, rng, n):
        return rng.standard_normal(n)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * x * x - 0.5 * _LOG_2PI


class Skewed(NoiseFamily):
    """Exp(1) - 1."""

    tag = "skewed"

    def sample(self, rng, n):
        return rng.standard_exponential(n) - 1.0

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            return np.where(x >= -1.0, -(x + 1.0), -np.inf)


class Mixture(NoiseFamily):
    """0.5 N(-1, 0.5^2) + 0.5 N(1, 0.5^2), rescaled to unit variance."""

    tag = "mixture"
    mu = _MIX_SCALE
    sd = 0.5 * _MIX_SCALE

    def sample(self, rng, n):
        signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return signs * self.mu + self.sd * rng.standard_normal(n)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        a = -0.5 * ((x - self.mu) / self.sd) ** 2
        b = -0.5 * ((x + self.mu) / self.sd) ** 2
        return np.logaddexp(a, b) + math.log(0.5) - math.log(self.sd) - 0.5 * _LOG_2PI


class StudentT(NoiseFamily):
    """t(5) scaled by sqrt(3/5)."""

    tag = "student_t"

    def sample(self, rng, n):
        return _T_SCALE * rng.standard_t(_T_DF, n)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return sps.t.logpdf(x / _T_SCALE, _T_DF) - math.log(_T_SCALE)


class HalfNormal(NoiseFamily):
    """|N(0, 1)|; positive support (hidden-phase demo only)."""

    tag = "half_normal"

    def sample(self, rng, n):
        return np.abs(rng.standard_normal(n))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            return np.where(x >= 0, math.log(2.0) - 0.5 * x * x - 0.5 * _LOG_2PI, -np.inf)


class Uniform01(NoiseFamily):
    tag = "uniform"

    def sample(self, rng, n):
        return rng.random(n)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= 0) & (x <= 1), 0.0, -np.inf)


@dataclass(frozen=True)
class Pushforward(NoiseFamily):
    """Law of ``psi(U)`` for a strictly monotone ``psi``."""

    base: NoiseFamily
    psi: Callable[[np.ndarray], np.ndarray]
    psi_inv: Callable[[np.ndarray], np.ndarray]
    dpsi: Callable[[np.ndarray], np.ndarray]

    @property
    def tag(self):  # type: ignore[override]
        return f"pushforward({self.base.tag})"

    def sample(self, rng, n):
        return self.psi(self.base.sample(rng, n))

    def logpdf(self, x):
        u = self.psi_inv(np.asarray(x, dtype=float))
        return self.base.logpdf(u) - np.log(np.abs(self.dpsi(u)))


NOISE_FAMILIES: dict[str, type[NoiseFamily]] = {
    cls.tag: cls for cls in (Gaussian, Skewed, Mixture, StudentT)
}


def make_noise(tag: str) -> NoiseFamily:
    try:
        return NOISE_FAMILIES[tag]()
    except KeyError:
        raise ValueError(f"unknown noise family {tag!r}") from None


@dataclass(frozen=True)
class ExogenousDistribution:
    """Independent per-coordinate exogenous law."""

    families: tuple[NoiseFamily, ...] = field(default_factory=tuple)

    @classmethod
    def iid(cls, tag: str, d: int) -> "ExogenousDistribution":
        fam = make_noise(tag)
        return cls(tuple(fam for _ in range(d)))

    @classmethod
    def of(cls, families: Sequence[NoiseFamily]) -> "ExogenousDistribution":
        return cls(tuple(families))

    @property
    def d(self) -> int:
        return len(self.families)

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(f.tag for f in self.families)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([f.sample(rng, n) for f in self.families])

    def log_density(self, u: np.ndarray) -> np.ndarray:
        """Per-coordinate log densities, same shape as ``u``."""
        u = np.asarray(u, dtype=float)
        cols = [f.logpdf(u[..., j]) for j, f in enumerate(self.families)]
        return np.stack(cols, axis=-1)


def standard_normal_logpdf(x: np.ndarray) -> np.ndarray:
    return -0.5 * np.square(x) - 0.5 * _LOG_2PI


def normal_cdf(x: np.ndarray) -> np.ndarray:
    return special.ndtr(x)
