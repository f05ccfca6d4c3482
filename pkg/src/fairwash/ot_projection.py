"""Wasserstein-minimal covariate perturbation under a DI constraint.

Each group is handled separately. For a dual weight ``lam`` every movable
point ``z`` is pushed by gradient descent on

    L(x) = |x - z|^2 - lam * d_s * f(x)

(``d_0 = +1`` raises the score in group 0, ``d_1 = -1`` lowers it in group 1).
``lam`` grows geometrically from a small start until the group's positive
rate reaches its target; surplus flips are then reverted so the target is met
with the fewest modified rows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, disparate_impact, group_counts
from .entropic import delta_split
from .model import Classifier

logger = logging.getLogger(__name__)


class ConstraintUnreachableError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProjectionConfig:
    target_di: float = 0.8
    mode: str = "balanced"
    variant_1d: bool = False
    lambda0_init: float = 1e-3
    lambda_growth: float = 1.2
    eta_init: float = 0.25
    eta_decay: float = 1.2
    inner_iters: int = 10
    lambda_cap_factor: float = 2.0 ** 40

    def __post_init__(self):
        if self.lambda_growth <= 1 or self.eta_decay <= 1:
            raise ValueError("lambda_growth and eta_decay must be > 1")
        if self.lambda0_init <= 0 or self.eta_init <= 0:
            raise ValueError("lambda0_init and eta_init must be positive")


@dataclass(frozen=True)
class GroupTargets:
    """Continuous target positive rates and the flip counts that realise them."""

    p0_target: float
    p1_target: float
    flips0: int
    flips1: int
    delta0: float = 0.0
    delta1: float = 0.0


@dataclass
class GroupRun:
    group: int
    lambda_star: float
    lambda_history: list[float]
    flipped_rows: np.ndarray
    target_rate: float  # rate realised by the required integer number of flips
    achieved_rate: float


@dataclass
class ManipulationResult:
    """Output of a manipulation method."""

    method: str
    data: object  # Dataset or WeightedDistribution
    original_di: float
    achieved_di: float
    target_di: float
    moves: list = field(default_factory=list)
    modified_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    info: dict = field(default_factory=dict)


def objective(model: Classifier, z, x, lam: float, direction: int) -> np.ndarray:
    """Row-wise ``|z - x|^2 - lam * direction * f(x)``."""
    x = np.atleast_2d(x)
    z = np.atleast_2d(z)
    return np.sum((x - z) ** 2, axis=1) - lam * direction * model.predict_logits(x)


def project_point(model: Classifier, z, lam: float, direction: int, eta: float = 0.25,
                  iters: int = 10, eta_decay: float = 1.2) -> np.ndarray:
    """Gradient descent on ``|z - x|^2 - lam * direction * f(x)`` from ``x = z``.

    ``z`` may be one point or a matrix of points (processed independently).
    """
    single = np.ndim(z) == 1
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x = z.copy()
    for _ in range(iters):
        g = 2.0 * (x - z) - lam * direction * model.grad_input(x)
        x = x - eta * g
        eta /= eta_decay
    return x[0] if single else x


def snap_1d(x, achievable) -> np.ndarray:
    """Replace each coordinate by the nearest value of that feature's sorted
    achievable set; ties go to the lower value."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x).copy()
    for j, vals in enumerate(achievable):
        vals = np.asarray(vals, dtype=float)
        pos = np.searchsorted(vals, X[:, j])
        lo = vals[np.clip(pos - 1, 0, vals.size - 1)]
        hi = vals[np.clip(pos, 0, vals.size - 1)]
        X[:, j] = np.where(np.abs(X[:, j] - lo) <= np.abs(hi - X[:, j]), lo, hi)
    return X[0] if single else X


def achievable_values(data: Dataset) -> list[np.ndarray]:
    return [np.unique(data.X[:, j]) for j in range(data.d)]


@dataclass(frozen=True)
class SlacknessReport:
    violation: np.ndarray  # max(0, t - achieved)
    residual: float  # |<lambda*, t - achieved>|

    @property
    def feasible(self) -> bool:
        return bool(np.all(self.violation <= 0))


def check_slackness(lambda_star, t, achieved) -> SlacknessReport:
    """Primal feasibility and complementary slackness for ``E[phi] >= t``."""
    lam = np.atleast_1d(np.asarray(lambda_star, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    a = np.atleast_1d(np.asarray(achieved, dtype=float))
    return SlacknessReport(np.maximum(0.0, t - a), float(abs(lam @ (t - a))))


def group_targets(data: Dataset, target_di: float, mode: str) -> GroupTargets:
    c = group_counts(data)
    di0 = disparate_impact(c)
    if target_di <= di0:
        return GroupTargets(c.lambda0 / c.n0, c.lambda1 / c.n1, 0, 0)
    d0, d1 = delta_split(c, target_di - di0, mode)
    # smallest integer flips reaching the continuous targets; the FP slack
    # absorbs rounding when delta is an exact integer
    k0 = max(0, math.ceil(d0 - 1e-9))
    k1 = max(0, math.ceil(d1 - 1e-9))
    while ((c.lambda0 + k0) / c.n0) / ((c.lambda1 - k1) / c.n1) < target_di * (1 - 1e-12):
        k0 += 1
    if c.lambda0 + k0 > c.n0 or c.lambda1 - k1 <= 0:
        raise ConstraintUnreachableError("not enough movable rows to reach target DI")
    return GroupTargets((c.lambda0 + d0) / c.n0, (c.lambda1 - d1) / c.n1, k0, k1, d0, d1)


def _run_group(model: Classifier, Z0: np.ndarray, need: int, direction: int,
               cfg: ProjectionConfig, achievable) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Escalate ``lambda`` until ``need`` of the rows in ``Z0`` flip.

    Returns (moved points, flipped mask after trimming, lambda*, lambda history).
    """
    m = Z0.shape[0]
    if need == 0:
        return Z0.copy(), np.zeros(m, dtype=bool), 0.0, []
    if need > m:
        raise ConstraintUnreachableError(f"need {need} flips but only {m} movable rows")
    th = model.threshold

    def flipped_of(x):
        s = model.predict_logits(x)
        return s > th if direction > 0 else s <= th

    lam = cfg.lambda0_init
    cap = cfg.lambda0_init * cfg.lambda_cap_factor
    history = []
    while True:
        history.append(lam)
        Z = Z0.copy()
        frozen = np.zeros(m, dtype=bool)
        eta = cfg.eta_init
        done = False
        for _ in range(cfg.inner_iters):
            act = ~frozen
            x = Z[act]
            g = 2.0 * (x - Z0[act]) - lam * direction * model.grad_input(x)
            x = x - eta * g
            if cfg.variant_1d:
                x = snap_1d(x, achievable)
            Z[act] = x
            eta /= cfg.eta_decay
            frozen |= flipped_of(Z)
            if frozen.sum() >= need:
                done = True
                break
        if done:
            break
        lam *= cfg.lambda_growth
        if lam > cap:
            raise ConstraintUnreachableError(
                f"constraint unreachable under model geometry (lambda exceeded {cap:.3g})")
    # keep the `need` flipped rows with the smallest displacement
    flipped = np.flatnonzero(frozen)
    disp = np.sum((Z[flipped] - Z0[flipped]) ** 2, axis=1)
    keep = flipped[np.lexsort((flipped, disp))[:need]]
    mask = np.zeros(m, dtype=bool)
    mask[keep] = True
    out = Z0.copy()
    out[mask] = Z[mask]
    return out, mask, lam, history


def fairwash_grad(data: Dataset, model: Classifier, config: ProjectionConfig = ProjectionConfig()) -> ManipulationResult:
    """Move covariates of the fewest rows needed so the model's DI on the
    perturbed data reaches ``config.target_di``.

    ``data.Yhat`` must be the model's predictions on ``data.X``.
    """
    pred = model.predict(data.X)
    if np.any(pred != data.Yhat):
        raise ValueError("data.Yhat disagrees with the model predictions; annotate the data first")
    di0 = disparate_impact(data)
    name = "grad_" + ("b" if config.mode == "balanced" else "p") + ("_1d" if config.variant_1d else "")
    targets = group_targets(data, config.target_di, config.mode)
    achievable = achievable_values(data) if config.variant_1d else None
    X = data.X.copy()
    runs = []
    modified = []
    for s, direction, need in ((0, +1, targets.flips0), (1, -1, targets.flips1)):
        rows = np.flatnonzero((data.S == s) & (data.Yhat == (0 if s == 0 else 1)))
        moved, mask, lam, hist = _run_group(model, data.X[rows], need, direction, config, achievable)
        X[rows[mask]] = moved[mask]
        modified.append(rows[mask])
        n_s = int(np.sum(data.S == s))
        base = int(np.sum((data.S == s) & (data.Yhat == 1)))
        realised = (base + need) / n_s if s == 0 else (base - need) / n_s
        runs.append(GroupRun(s, lam, hist, rows[mask], realised, float("nan")))
    out = model.annotate(data.replace(X=X))
    for r in runs:
        r.achieved_rate = float(np.mean(out.Yhat[out.S == r.group]))
    achieved = disparate_impact(out)
    return ManipulationResult(
        method=name, data=out, original_di=di0, achieved_di=achieved, target_di=config.target_di,
        modified_rows=np.sort(np.concatenate(modified)),
        info={"targets": targets, "groups": runs},
    )


def grad_slackness(result: ManipulationResult) -> list[SlacknessReport]:
    """Slackness check per group, written as ``E[d_s f] >= d_s t_s``."""
    reports = []
    for r in result.info["groups"]:
        sign = 1.0 if r.group == 0 else -1.0
        reports.append(check_slackness([r.lambda_star], [sign * r.target_rate], [sign * r.achieved_rate]))
    return reports
