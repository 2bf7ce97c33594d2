"""Conditioning features and the monotone scalar spline flow.

The flow ``q(u)`` has slope ``q'(u) = sum_k c_k N_k(u)``: a uniform quadratic
B-spline in the eight control slopes ``c_k`` on [-4, 4] (one unit per
segment), constant beyond the range.  The map is therefore piecewise cubic,
C2, strictly increasing whenever every ``c_k > 0`` and linear in the tails.
It is anchored at ``q(-4) = -4`` so unit slopes give the identity.

Because ``q`` is linear in the slopes, ``q(u) = -4 + G(u) . c`` with a fixed
integrated basis ``G``; parameter gradients of ``q``, ``q'`` and of the
inverse all reduce to evaluating ``G``, ``N`` and ``N'`` at one point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_KNOTS = 8
LEFT = -4.0
RIGHT = 4.0
WIDTH = (RIGHT - LEFT) / N_KNOTS
SLOPE_FLOOR = 1e-3
N_PROJECTIONS = 8
CLIP = 5.0


def _segment_weights(t: np.ndarray):
    """Slope, integral and slope-derivative weights on (c_{j-1}, c_j, c_{j+1})."""
    s = 1.0 - t
    w = (0.5 * s * s, 0.5 * (-2 * t * t + 2 * t + 1), 0.5 * t * t)
    integ = ((1.0 - s**3) / 6.0, -(t**3) / 3.0 + 0.5 * t * t + 0.5 * t, t**3 / 6.0)
    dw = (-s, 1.0 - 2.0 * t, t)
    return w, integ, dw


def _neighbours(j: np.ndarray):
    return np.maximum(j - 1, 0), j, np.minimum(j + 1, N_KNOTS - 1)


def _cumulative() -> np.ndarray:
    cum = np.zeros((N_KNOTS + 1, N_KNOTS))
    for j in range(N_KNOTS):
        cum[j + 1] = cum[j]
        for idx, wt in zip(_neighbours(np.array(j)), (1 / 6, 2 / 3, 1 / 6)):
            cum[j + 1, int(idx)] += WIDTH * wt
    return cum


CUMULATIVE = _cumulative()  # G at the left edge of every segment (and at RIGHT)


def spline_basis(u: np.ndarray, need: str = "GNd"):
    """Return the requested of (G, N, dN), each of shape (n, K), at points ``u``."""
    u = np.asarray(u, dtype=float).ravel()
    n = u.size
    x = (u - LEFT) / WIDTH
    j = np.clip(np.floor(x).astype(int), 0, N_KNOTS - 1)
    t = x - j
    left = u < LEFT
    right = u >= RIGHT
    inside = ~(left | right)
    t = np.where(inside, t, 0.0)
    cols = _neighbours(j)
    w, integ, dw = _segment_weights(t)
    rows = np.arange(n)

    out = []
    if "G" in need:
        G = CUMULATIVE[j].copy()
        G[~inside] = 0.0
        for c, wt in zip(cols, integ):
            G[rows, c] += np.where(inside, WIDTH * wt, 0.0)
        G[left, 0] = u[left] - LEFT
        G[right] = CUMULATIVE[N_KNOTS]
        G[right, N_KNOTS - 1] += u[right] - RIGHT
        out.append(G)
    if "N" in need:
        N = np.zeros((n, N_KNOTS))
        for c, wt in zip(cols, w):
            N[rows, c] += np.where(inside, wt, 0.0)
        N[left, 0] = 1.0
        N[right, N_KNOTS - 1] = 1.0
        out.append(N)
    if "d" in need:
        dN = np.zeros((n, N_KNOTS))
        for c, wt in zip(cols, dw):
            dN[rows, c] += np.where(inside, wt / WIDTH, 0.0)
        out.append(dN)
    return tuple(out)


def slopes_from_logits(a: np.ndarray) -> np.ndarray:
    return SLOPE_FLOOR + (1.0 - SLOPE_FLOOR) * np.exp(np.minimum(a, 50.0))


def flow_forward(u: np.ndarray, c: np.ndarray) -> np.ndarray:
    """q(u) for rows of control slopes ``c`` (n, K)."""
    (G,) = spline_basis(u, "G")
    return LEFT + np.sum(G * c, axis=1)


def flow_derivative(u: np.ndarray, c: np.ndarray) -> np.ndarray:
    (N,) = spline_basis(u, "N")
    return np.sum(N * c, axis=1)


def flow_inverse(y: np.ndarray, c: np.ndarray, tol: float = 1e-14) -> np.ndarray:
    """Invert q row-wise: segment search on the knot values, then safeguarded Newton."""
    y = np.asarray(y, dtype=float).ravel()
    c = np.broadcast_to(c, (y.size, N_KNOTS))
    knots = LEFT + c @ CUMULATIVE.T  # (n, K + 1)
    seg = np.sum(knots <= y[:, None], axis=1) - 1  # -1 .. K

    u = np.empty_like(y)
    left = seg < 0
    right = seg >= N_KNOTS
    u[left] = LEFT + (y[left] - LEFT) / c[left, 0]
    u[right] = RIGHT + (y[right] - knots[right, N_KNOTS]) / c[right, N_KNOTS - 1]

    mid = ~(left | right)
    if np.any(mid):
        rows = np.flatnonzero(mid)
        j = seg[mid]
        jm, j0, jp = _neighbours(j)
        ca, cb, cc = c[rows, jm], c[rows, j0], c[rows, jp]
        r = y[mid] - knots[rows, j]
        span = knots[rows, j + 1] - knots[rows, j]
        t = np.clip(r / span, 0.0, 1.0)
        lo = np.zeros_like(t)
        hi = np.ones_like(t)
        for _ in range(100):
            s = 1.0 - t
            t2 = t * t
            t3 = t2 * t
            f = WIDTH * (ca * (1.0 - s * s * s) / 6.0 + cb * (-t3 / 3.0 + 0.5 * (t2 + t)) + cc * t3 / 6.0) - r
            fp = WIDTH * 0.5 * (ca * s * s + cb * (-2.0 * t2 + 2.0 * t + 1.0) + cc * t2)
            lo = np.where(f < 0, t, lo)
            hi = np.where(f > 0, t, hi)
            step = f / fp
            t_new = t - step
            bad = (t_new < lo) | (t_new > hi)
            t_new = np.where(bad, 0.5 * (lo + hi), t_new)
            done = np.max(np.abs(t_new - t)) < tol
            t = t_new
            if done:
                break
        u[mid] = LEFT + (j + t) * WIDTH
    return u


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Bias, clipped parents, their degree-2 monomials and tanh random projections.

    A root mechanism (no parents) gets the bias feature only.
    """

    n_parents: int
    seed: int
    proj: np.ndarray
    offset: np.ndarray

    @classmethod
    def create(cls, n_parents: int, seed: int) -> "FeatureMap":
        rng = np.random.default_rng([seed, n_parents])
        k = max(n_parents, 1)
        proj = rng.standard_normal((N_PROJECTIONS, n_parents)) / np.sqrt(k)
        offset = rng.uniform(-1.0, 1.0, N_PROJECTIONS)
        return cls(n_parents, seed, proj, offset)

    @property
    def dim(self) -> int:
        k = self.n_parents
        if k == 0:
            return 1
        return 1 + k + k * (k + 1) // 2 + N_PROJECTIONS

    def __call__(self, contexts: np.ndarray) -> np.ndarray:
        c = np.asarray(contexts, dtype=float)
        if self.n_parents == 0:
            return np.ones((c.shape[0], 1))
        c = c.reshape(-1, self.n_parents)
        n = c.shape[0]
        c = np.clip(c, -CLIP, CLIP)
        iu, ju = np.triu_indices(self.n_parents)
        quad = 0.5 * c[:, iu] * c[:, ju]
        proj = np.tanh(c @ self.proj.T + self.offset)
        return np.hstack([np.ones((n, 1)), c, quad, proj])
