"""Independent reference solvers used by the tests."""
import itertools

import numpy as np


def kl_to_uniform(w):
    w = np.asarray(w, float)
    pos = w > 0
    return float(np.sum(w[pos] * np.log(w.size * w[pos])))


def primal_tilt(phi, target, w0, iters=200, tol=1e-14):
    """Minimise ``KL(w, uniform)`` over the simplex subject to ``phi^T w = t``
    by projected (Hessian-scaled) gradient steps in the primal, started from a
    strictly positive feasible ``w0``."""
    phi = np.asarray(phi, float)
    A = np.vstack([phi.T, np.ones(phi.shape[0])])
    w = np.asarray(w0, float).copy()
    n = w.size
    f = lambda v: float(np.sum(v * np.log(n * v)))
    for _ in range(iters):
        g = np.log(n * w) + 1.0
        Hinv = w
        M = (A * Hinv) @ A.T
        nu = np.linalg.lstsq(M, -(A * Hinv) @ g, rcond=None)[0]
        dw = -Hinv * (g + A.T @ nu)  # lies in the null space of A
        dec = -g @ dw
        if dec <= tol:
            break
        s = 1.0
        while np.any(w + s * dw <= 0):
            s *= 0.5
        while f(w + s * dw) > f(w) - 0.25 * s * dec and s > 1e-16:
            s *= 0.5
        w = w + s * dw
    return w


def brute_force_w2(x, y):
    """Mean squared cost of the best permutation matching of equal-size clouds."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    C = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    n = len(x)
    return min(C[np.arange(n), list(p)].sum() / n for p in itertools.permutations(range(n)))


def bins_of(S, Yhat):
    return 2 * np.asarray(S) + np.asarray(Yhat)


def di_of_bins(c):
    n0, n1 = c[0] + c[1], c[2] + c[3]
    if n0 == 0 or n1 == 0:
        return float("nan")
    if c[3] == 0:
        return 1.0 if c[1] == 0 else float("inf")
    return (c[1] / n0) / (c[3] / n1)
