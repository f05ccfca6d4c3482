"""KL-minimal reweighting of an empirical measure under moment constraints.

The minimiser of ``KL(P, Q_n)`` subject to ``E_P[phi] = t`` is the Gibbs
reweighting ``w_i = exp(<xi, phi_i> - log Z(xi)) / n`` where ``xi`` minimises
the convex dual ``H(xi) = log Z(xi) - <xi, t>``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, GroupCounts, WeightedDistribution, disparate_impact, group_counts

logger = logging.getLogger(__name__)


class InfeasibleTargetError(ValueError):
    pass


@dataclass(frozen=True)
class MomentConstraint:
    phi_values: np.ndarray  # (n, k)
    target: np.ndarray  # (k,)

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi_values, dtype=float))
        if phi.shape[0] == 1 and np.ndim(self.phi_values) == 1:
            phi = phi.T
        t = np.atleast_1d(np.asarray(self.target, dtype=float))
        if phi.shape[1] != t.shape[0]:
            raise ValueError(f"phi has {phi.shape[1]} columns but target has {t.shape[0]}")
        object.__setattr__(self, "phi_values", phi)
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class TiltSolution:
    xi: np.ndarray
    log_partition: float
    weights: np.ndarray
    iterations: int
    residual: float

    @property
    def kl(self) -> float:
        """``KL(Q_t, Q_n) = sum_i w_i log(n w_i)``."""
        w = self.weights
        n = w.size
        pos = w > 0
        return float(np.sum(w[pos] * np.log(n * w[pos])))


def log_partition(phi_values, xi):
    """``log Z(xi)`` with ``Z(xi) = mean_i exp(<phi_i, xi>)``, plus the tilted
    mean (its gradient) and tilted covariance (its Hessian)."""
    phi = np.asarray(phi_values, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    a = phi @ xi
    logZ = float(logsumexp(a) - math.log(phi.shape[0]))
    p = np.exp(a - logsumexp(a))
    mean = p @ phi
    centered = phi - mean
    cov = (centered * p[:, None]).T @ centered
    return logZ, mean, cov


def _reduce(phi: np.ndarray, t: np.ndarray, tol: float):
    """Drop affinely dependent constraint directions.

    Returns ``(phi_r, t_r, basis)`` with ``phi_r = (phi - mean) @ basis``.
    """
    mean = phi.mean(axis=0)
    A = phi - mean
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    scale = sv[0] if sv.size and sv[0] > 0 else 1.0
    rank = int(np.sum(sv > 1e-10 * max(scale, 1.0) * max(phi.shape)))
    V = Vt[:rank].T
    dt = t - mean
    off = dt - V @ (V.T @ dt)
    if np.max(np.abs(off), initial=0.0) > max(tol, 1e-12) * 10:
        raise InfeasibleTargetError("target outside convex hull (violates an affine dependence of phi)")
    return A @ V, dt @ V, V


def _residual(phi, t, a) -> float:
    w = np.exp(a - logsumexp(a))
    return float(np.max(np.abs(w @ phi - t), initial=0.0))


def solve_tilt(c: MomentConstraint, tol: float = 1e-9, max_iter: int = 200,
               xi_bound: float = 1e4) -> TiltSolution:
    """Newton's method with Armijo backtracking on the dual ``H``.

    Stops when ``max |E_w[phi] - t| <= tol``. Diverging ``xi`` means the target
    is not in the interior of the convex hull of the ``phi_i``.
    """
    phi, t = c.phi_values, c.target
    n = phi.shape[0]
    phi_r, t_r, V = _reduce(phi, t, tol)
    k = phi_r.shape[1]
    xi = np.zeros(k)

    def H(x):
        return logsumexp(phi_r @ x) - math.log(n) - x @ t_r

    it = 0
    for it in range(1, max_iter + 1):
        logZ, mean, cov = log_partition(phi_r, xi)
        grad = mean - t_r
        res = _residual(phi, t, phi_r @ xi)
        if res <= tol:
            break
        try:
            step = -np.linalg.solve(cov, grad)
        except np.linalg.LinAlgError:
            logger.warning("singular tilted covariance; regularising Newton step")
            step = -np.linalg.solve(cov + 1e-10 * np.eye(k), grad)
        h0 = logZ - xi @ t_r
        slope = grad @ step
        if slope >= 0:  # numerically indefinite; fall back to gradient descent
            step, slope = -grad, -(grad @ grad)
        s = 1.0
        while H(xi + s * step) > h0 + 1e-4 * s * slope and s > 1e-12:
            # near the optimum the decrease in H drops below rounding error;
            # fall back to judging the step by the moment residual
            if -slope * s < 1e-13 * max(1.0, abs(h0)) and _residual(phi, t, phi_r @ (xi + s * step)) < res:
                break
            s *= 0.5
        xi = xi + s * step
        if not np.all(np.isfinite(xi)) or np.linalg.norm(xi) > xi_bound:
            raise InfeasibleTargetError("target outside convex hull (dual variable diverged)")
    else:
        if _residual(phi, t, phi_r @ xi) > tol:
            raise InfeasibleTargetError(
                f"no convergence after {max_iter} Newton steps; target likely on or outside the hull")

    a = phi_r @ xi
    w = np.exp(a - logsumexp(a))
    w /= w.sum()
    full_xi = V @ xi
    residual = float(np.max(np.abs(w @ phi - t)))
    # log Z in the original coordinates differs from the centred one by <xi, mean(phi)>
    logZ_full = float(logsumexp(phi @ full_xi) - math.log(n))
    return TiltSolution(xi=full_xi, log_partition=logZ_full, weights=w,
                        iterations=it, residual=residual)


def delta_split(c: GroupCounts, delta_di: float, mode: str = "balanced") -> tuple[float, float]:
    """Mass to add to group-0 positives (``delta0``) and remove from group-1
    positives (``delta1``) so DI rises by exactly ``delta_di``.

    ``balanced`` sets ``delta0 = delta1``; ``proportional`` sets
    ``delta0 / n0 = delta1 / n1``.
    """
    if delta_di <= 0:
        raise ValueError("delta_di must be positive")
    if c.lambda1 <= 0:
        raise InfeasibleTargetError("group 1 has no positive predictions")
    n0, n1, l0, l1 = c.n0, c.n1, c.lambda0, c.lambda1
    if mode == "balanced":
        d1 = l1 / (1.0 + (n1 / (n0 * delta_di)) * (1.0 + l0 / l1))
        d0 = d1
    elif mode == "proportional":
        d1 = l1 / (1.0 + (1.0 / delta_di) * (1.0 + n1 * l0 / (n0 * l1)))
        d0 = d1 * n0 / n1
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if l0 + d0 > n0 * (1 + 1e-12):
        raise InfeasibleTargetError(
            f"infeasible target: group 0 would need {l0 + d0:.4g} positives out of {n0:.4g}")
    if l1 - d1 <= 0:
        raise InfeasibleTargetError("infeasible target: group 1 positives exhausted")
    return d0, d1


def di_phi(data: Dataset) -> np.ndarray:
    """Per-atom constraint features ``((1-s) yhat, s yhat, s, 1-s)``."""
    s = data.S.astype(float)
    y = data.Yhat.astype(float)
    return np.column_stack([(1 - s) * y, s * y, s, 1 - s])


def fairwash_entropic(data: Dataset, target_di: float, mode: str = "balanced",
                      tol: float = 1e-12) -> WeightedDistribution:
    """KL-closest reweighting of ``data`` whose DI equals ``target_di``."""
    c = group_counts(data)
    di0 = disparate_impact(c)
    if c.n0 == 0 or c.n1 == 0:
        raise InfeasibleTargetError("both sensitive groups must be nonempty")
    delta_di = target_di - di0
    if abs(delta_di) <= 1e-12:
        return data.uniform()
    if delta_di < 0:
        raise ValueError(f"target DI {target_di} is below the current DI {di0:.6g}")
    d0, d1 = delta_split(c, delta_di, mode)
    n = data.n
    target = np.array([c.lambda0 + d0, c.lambda1 - d1, c.n1, c.n0]) / n
    sol = solve_tilt(MomentConstraint(di_phi(data), target), tol=tol)
    return WeightedDistribution(data, sol.weights)
