"""Synthetic audit data with controlled group and outcome rates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset


@dataclass(frozen=True)
class SyntheticSpec:
    """``S ~ Bernoulli(p_s)``, ``Yhat | S=s ~ Bernoulli(p_s_rate)``,
    ``X | (S, Yhat) ~ N(mean[s, yhat], I_d)``.

    Bin means default to corners of the cube ``[-half_side, half_side]^d``:
    the first coordinate encodes ``S``, the second ``Yhat`` and any further
    coordinates alternate between the two.
    """

    n: int = 2000
    p_s: float = 0.5
    p0: float = 0.12
    p1: float = 0.40
    d: int = 2
    half_side: float = 1.0
    means: tuple | None = None  # optional explicit ((m00, m01), (m10, m11)) in R^d
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_s", "p0", "p1"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.n < 2 or self.d < 1:
            raise ValueError("need n >= 2 and d >= 1")
        if not 0 <= self.label_noise < 0.5:
            raise ValueError("label_noise must lie in [0, 0.5)")

    @property
    def expected_di(self) -> float:
        return self.p0 / self.p1

    def bin_means(self) -> np.ndarray:
        """``(2, 2, d)`` array indexed by ``[s, yhat]``."""
        if self.means is not None:
            m = np.asarray(self.means, dtype=float)
            if m.shape != (2, 2, self.d):
                raise ValueError(f"means must have shape (2, 2, {self.d})")
            return m
        m = np.empty((2, 2, self.d))
        for s in (0, 1):
            for y in (0, 1):
                bits = [(s, y)[j % 2] for j in range(self.d)]
                m[s, y] = self.half_side * (2 * np.array(bits, dtype=float) - 1)
        return m


def gen_synthetic(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Draw a dataset from ``spec``. ``Y`` equals ``Yhat`` up to the label noise."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    S = (rng.random(spec.n) < spec.p_s).astype(np.int8)
    rate = np.where(S == 1, spec.p1, spec.p0)
    Yhat = (rng.random(spec.n) < rate).astype(np.int8)
    means = spec.bin_means()
    X = means[S, Yhat] + rng.standard_normal((spec.n, spec.d))
    Y = Yhat.copy()
    if spec.label_noise > 0:
        flip = rng.random(spec.n) < spec.label_noise
        Y[flip] = 1 - Y[flip]
    return Dataset(X=X, S=S, Yhat=Yhat, Y=Y)
