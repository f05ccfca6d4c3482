"""Distances between (weighted) empirical measures.

Squared 2-Wasserstein (exact), the 4-bin Wasserstein on ``(S, Yhat)``, KL on
exact atoms and on bins, Gaussian-kernel MMD and the two-sample KS statistic.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist, pdist
from scipy.stats import kstwobign

for _backend in ("PYTORCH", "JAX", "CUPY", "TENSORFLOW"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

from .data import Dataset, WeightedDistribution  # noqa: E402

DEFAULT_MAX_ATOMS = 5000

# (s, yhat) coordinates of the four bins in bin_histogram order
BIN_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


class SizeLimitError(ValueError):
    pass


@dataclass(frozen=True)
class TransportPlan:
    source: np.ndarray  # source atom index per transported piece
    target: np.ndarray
    mass: np.ndarray
    cost: float  # total squared cost

    def dense(self, n_source: int, n_target: int) -> np.ndarray:
        G = np.zeros((n_source, n_target))
        np.add.at(G, (self.source, self.target), self.mass)
        return G


@dataclass(frozen=True)
class Scaler:
    """Per-feature standardisation fitted on a reference sample."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Scaler":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def embed(self, data: Dataset) -> np.ndarray:
        """Standardised ``X`` followed by the raw ``S`` and ``Yhat`` columns."""
        return np.column_stack([(data.X - self.mean) / self.scale, data.S, data.Yhat]).astype(float)


def _atoms(P):
    """Normalise input to ``(points, weights)``."""
    if isinstance(P, WeightedDistribution):
        return P.base.records(), P.weights
    if isinstance(P, Dataset):
        return P.records(), np.full(P.n, 1.0 / P.n)
    if isinstance(P, tuple):
        pts, w = P
        pts = np.asarray(pts, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return pts, np.asarray(w, dtype=float)
    pts = np.asarray(P, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts, np.full(pts.shape[0], 1.0 / pts.shape[0])


def wasserstein_exact(P, Q, max_atoms: int = DEFAULT_MAX_ATOMS, approximate: bool = False):
    """Exact ``W_2^2`` with squared-Euclidean ground cost.

    ``P`` and ``Q`` are point arrays (uniform weights), ``(points, weights)``
    tuples, or datasets. Equal-size uniform inputs are solved as an
    assignment problem; anything else by network simplex.
    Returns ``(w2_squared, TransportPlan)``.
    """
    xp, a = _atoms(P)
    xq, b = _atoms(Q)
    if xp.shape[0] == 0 or xq.shape[0] == 0:
        raise ValueError("empty measure")
    if not (abs(a.sum() - 1) < 1e-8 and abs(b.sum() - 1) < 1e-8):
        raise ValueError("measures must have total mass 1")
    if max(xp.shape[0], xq.shape[0]) > max_atoms and not approximate:
        raise SizeLimitError(f"{max(xp.shape[0], xq.shape[0])} atoms exceeds cap {max_atoms}")
    M = cdist(xp, xq, "sqeuclidean")
    n, m = M.shape
    if n == m and np.allclose(a, 1.0 / n, rtol=0, atol=1e-15) and np.allclose(b, 1.0 / m, rtol=0, atol=1e-15):
        rows, cols = linear_sum_assignment(M)
        mass = np.full(n, 1.0 / n)
        cost = float(M[rows, cols].sum() / n)
        return cost, TransportPlan(rows, cols, mass, cost)
    a = a / a.sum()
    b = b / b.sum()
    G = ot.emd(a, b, M, numItermax=10_000_000)
    src, tgt = np.nonzero(G > 0)
    mass = G[src, tgt]
    cost = float(np.sum(mass * M[src, tgt]))
    return max(cost, 0.0), TransportPlan(src, tgt, mass, cost)


def wasserstein_sy(p, q) -> float:
    """Exact ``W_2^2`` between two 4-bin ``(S, Yhat)`` histograms (ground cost
    0, 1 or 2), solved as a 16-variable LP."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    C = cdist(BIN_POINTS, BIN_POINTS, "sqeuclidean")
    A_eq = np.zeros((8, 16))
    for i in range(4):
        A_eq[i, 4 * i:4 * i + 4] = 1.0
        A_eq[4 + i, i::4] = 1.0
    b_eq = np.concatenate([p / p.sum(), q / q.sum()])
    res = linprog(C.ravel(), A_eq=A_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"bin transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


def _atom_keys(points: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=float) + 0.0  # folds -0.0 into 0.0
    return points.view(np.dtype((np.void, points.dtype.itemsize * points.shape[1]))).ravel()


def kl_atoms(P, Q) -> float:
    """``KL(P, Q)`` over exactly matching atoms; ``inf`` when ``P`` puts mass on
    an atom absent from ``Q``."""
    xp, a = _atoms(P)
    xq, b = _atoms(Q)
    kp, kq = _atom_keys(xp), _atom_keys(xq)
    keys, inv = np.unique(np.concatenate([kp, kq]), return_inverse=True)
    pm = np.bincount(inv[:kp.size], weights=a, minlength=keys.size)
    qm = np.bincount(inv[kp.size:], weights=b, minlength=keys.size)
    return _kl_hist(pm, qm)


def _kl_hist(p, q) -> float:
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return max(float(np.sum(p[pos] * np.log(p[pos] / q[pos]))), 0.0)


def kl_sy(p, q, smoothing: float = 0.0) -> float:
    """``KL`` between 4-bin histograms. ``smoothing`` adds a pseudo-mass to every
    bin before renormalising (diagnostics only)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if smoothing:
        p = p + smoothing
        q = q + smoothing
    return _kl_hist(p / p.sum(), q / q.sum())


def _weighted_median(values, counts) -> float:
    order = np.argsort(values)
    cum = np.cumsum(counts[order])
    return float(values[order][np.searchsorted(cum, cum[-1] / 2)])


def median_pairwise_distance(points, weights=None) -> float:
    """Median of pairwise Euclidean distances over a pooled sample.

    Integer ``weights`` act as multiplicities. If more than half the pairs
    coincide, the median over the nonzero distances is used; if all points
    coincide the bandwidth falls back to 1.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if weights is None:
        dist = pdist(pts)
        cnt = np.ones_like(dist)
    else:
        w = np.asarray(weights, dtype=float)
        pts, w = pts[w > 0], w[w > 0]
        iu = np.triu_indices(len(pts), 1)
        dist = np.concatenate([cdist(pts, pts)[iu], np.zeros(len(pts))])
        cnt = np.concatenate([w[iu[0]] * w[iu[1]], w * (w - 1) / 2])
    keep = cnt > 0
    dist, cnt = dist[keep], cnt[keep]
    if dist.size == 0 or np.all(dist == 0):
        return 1.0
    med = _weighted_median(dist, cnt)
    if med > 0:
        return med
    pos = dist > 0
    return _weighted_median(dist[pos], cnt[pos])


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-|x-y|^2 / (2 bandwidth^2))``."""

    bandwidth: float | str = "median-heuristic"

    def resolve(self, pooled) -> float:
        if self.bandwidth == "median-heuristic":
            return median_pairwise_distance(pooled)
        bw = float(self.bandwidth)
        if bw <= 0:
            raise ValueError("bandwidth must be positive")
        return bw


def _gauss(A, B, bw):
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bw * bw))


def mmd(P, Q, k: KernelSpec = KernelSpec()) -> float:
    """Biased (V-statistic) squared MMD between weighted atom sets."""
    xp, a = _atoms(P)
    xq, b = _atoms(Q)
    bw = k.resolve(np.vstack([xp, xq]))
    val = a @ _gauss(xp, xp, bw) @ a + b @ _gauss(xq, xq, bw) @ b - 2 * a @ _gauss(xp, xq, bw) @ b
    return max(float(val), 0.0)


def mmd_sy(p, q, bandwidth: float) -> float:
    """Squared MMD between 4-bin histograms on the ``(S, Yhat)`` corners."""
    K = _gauss(BIN_POINTS, BIN_POINTS, bandwidth)
    diff = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    return max(float(diff @ K @ diff), 0.0)


def ks_two_sample(u, v) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and its asymptotic p-value,
    using effective size ``n m / (n + m)``."""
    u = np.sort(np.asarray(u, dtype=float))
    v = np.sort(np.asarray(v, dtype=float))
    if u.size == 0 or v.size == 0:
        raise ValueError("empty sample")
    grid = np.concatenate([u, v])
    Fu = np.searchsorted(u, grid, side="right") / u.size
    Fv = np.searchsorted(v, grid, side="right") / v.size
    D = float(np.max(np.abs(Fu - Fv)))
    en = u.size * v.size / (u.size + v.size)
    p = float(kstwobign.sf(D * math.sqrt(en))) if D > 0 else 1.0
    return D, min(max(p, 0.0), 1.0)
