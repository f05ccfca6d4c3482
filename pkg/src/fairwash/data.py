"""Datasets, group statistics and Disparate Impact.

A :class:`Dataset` holds the audited rows ``(X, S, Yhat[, logits][, Y])``.
A :class:`WeightedDistribution` is the same set of atoms with arbitrary
probability weights, which is what a reweighting manipulation produces.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input data."""


class UndefinedMetricError(ValueError):
    """Raised when a fairness metric is undefined (an empty group)."""


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_binary(name: str, v: np.ndarray) -> None:
    bad = np.flatnonzero((v != 0) & (v != 1))
    if bad.size:
        raise DataError(f"{name} must be binary; row {int(bad[0])} has value {v[bad[0]]!r}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable audited sample.

    ``X`` is ``(n, d)``; ``S``, ``Yhat`` and the optional ``Y`` are 0/1
    vectors; ``logits`` (optional) are model scores in ``[0, 1]``.
    """

    X: np.ndarray
    S: np.ndarray
    Yhat: np.ndarray
    logits: np.ndarray | None = None
    Y: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2:
            raise DataError("X must be a 2-D matrix")
        n = X.shape[0]
        object.__setattr__(self, "X", _frozen(X, float))
        for name in ("S", "Yhat", "Y"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v)
            if v.shape != (n,):
                raise DataError(f"{name} has shape {v.shape}, expected ({n},)")
            _check_binary(name, v)
            object.__setattr__(self, name, _frozen(v, np.int8))
        if self.logits is not None:
            lg = np.asarray(self.logits, dtype=float)
            if lg.shape != (n,):
                raise DataError(f"logits has shape {lg.shape}, expected ({n},)")
            if np.any(~np.isfinite(lg)) or np.any((lg < 0) | (lg > 1)):
                raise DataError("logits must lie in [0, 1]")
            object.__setattr__(self, "logits", _frozen(lg, float))
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def replace(self, **changes) -> "Dataset":
        fields = dict(X=self.X, S=self.S, Yhat=self.Yhat, logits=self.logits,
                      Y=self.Y, feature_names=self.feature_names)
        fields.update(changes)
        return Dataset(**fields)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            X=self.X[idx], S=self.S[idx], Yhat=self.Yhat[idx],
            logits=None if self.logits is None else self.logits[idx],
            Y=None if self.Y is None else self.Y[idx],
            feature_names=self.feature_names,
        )

    def records(self) -> np.ndarray:
        """Rows of ``(X, S, Yhat)`` as one float matrix."""
        return np.column_stack([self.X, self.S, self.Yhat]).astype(float)

    def uniform(self) -> "WeightedDistribution":
        return WeightedDistribution(self, np.full(self.n, 1.0 / self.n))


@dataclass(frozen=True, eq=False)
class WeightedDistribution:
    """Atoms of ``base`` carrying probability ``weights``."""

    base: Dataset
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.base.n,):
            raise DataError(f"weights has shape {w.shape}, expected ({self.base.n},)")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise DataError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise DataError(f"weights sum to {w.sum():.12g}, expected 1")
        object.__setattr__(self, "weights", _frozen(w, float))

    @property
    def n(self) -> int:
        return self.base.n

    def is_uniform(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.n) <= tol))


@dataclass(frozen=True)
class GroupCounts:
    """Group sizes ``n0, n1`` and positive-prediction masses ``lambda0, lambda1``."""

    n0: float
    n1: float
    lambda0: float
    lambda1: float

    def __post_init__(self):
        if min(self.n0, self.n1, self.lambda0, self.lambda1) < 0:
            raise ValueError("group counts must be nonnegative")
        eps = 1e-9 * max(1.0, self.n0 + self.n1)
        if self.lambda0 > self.n0 + eps or self.lambda1 > self.n1 + eps:
            raise ValueError("positive mass exceeds group size")
        if self.n0 + self.n1 <= 0:
            raise ValueError("empty population")

    @property
    def n(self) -> float:
        return self.n0 + self.n1


def group_counts(dist: Dataset | WeightedDistribution) -> GroupCounts:
    """Sufficient statistics for DI.

    For a weighted distribution the masses are weight sums scaled by ``n``,
    so an atom of weight ``1/n`` contributes exactly 1.
    """
    if isinstance(dist, WeightedDistribution):
        data, w = dist.base, dist.weights * dist.n
        s = data.S.astype(float)
        y = data.Yhat.astype(float)
        return GroupCounts(
            n0=float(np.sum(w * (1 - s))), n1=float(np.sum(w * s)),
            lambda0=float(np.sum(w * (1 - s) * y)), lambda1=float(np.sum(w * s * y)),
        )
    s = dist.S.astype(np.int64)
    y = dist.Yhat.astype(np.int64)
    return GroupCounts(
        n0=int(np.sum(1 - s)), n1=int(np.sum(s)),
        lambda0=int(np.sum((1 - s) * y)), lambda1=int(np.sum(s * y)),
    )


def disparate_impact(c: GroupCounts | Dataset | WeightedDistribution) -> float:
    """``(lambda0/n0) / (lambda1/n1)``; ``inf`` if only group 1 has no positives,
    1 when neither group has positives."""
    if not isinstance(c, GroupCounts):
        c = group_counts(c)
    if c.n0 <= 0 or c.n1 <= 0:
        raise UndefinedMetricError("DI undefined: one sensitive group is empty")
    if c.lambda1 <= 0:
        return 1.0 if c.lambda0 <= 0 else math.inf
    return (c.lambda0 / c.n0) / (c.lambda1 / c.n1)


def bin_histogram(dist: Dataset | WeightedDistribution) -> np.ndarray:
    """Probability mass on the four ``(S, Yhat)`` bins, ordered
    ``(0,0), (0,1), (1,0), (1,1)``."""
    if isinstance(dist, WeightedDistribution):
        data, w = dist.base, dist.weights
    else:
        data, w = dist, np.full(dist.n, 1.0 / dist.n)
    code = 2 * data.S.astype(np.intp) + data.Yhat.astype(np.intp)
    return np.bincount(code, weights=w, minlength=4)


def sample_fraction(dist: Dataset | WeightedDistribution, fraction: float,
                    rng: np.random.Generator, replacement: bool | None = None) -> Dataset:
    """Draw ``round(fraction * n)`` rows.

    With replacement, atoms are drawn with probability equal to their weight.
    Without replacement is only allowed for uniform weights. ``None`` picks
    with replacement for non-uniform weights and without otherwise.
    """
    if isinstance(dist, Dataset):
        dist = dist.uniform()
    n = dist.n
    size = int(round(fraction * n))
    if not 0 < fraction <= 1 or size < 1:
        raise ValueError(f"fraction {fraction} gives an empty sample of {n} rows")
    uniform = dist.is_uniform()
    if replacement is None:
        replacement = not uniform
    if replacement:
        idx = rng.choice(n, size=size, replace=True, p=None if uniform else dist.weights)
    else:
        if not uniform:
            raise ValueError("sampling without replacement requires uniform weights")
        idx = rng.permutation(n)[:size]
    return dist.base.take(idx)


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for :func:`load_csv`. ``features=None`` takes every
    column not bound to another role."""

    s: str = "s"
    yhat: str = "yhat"
    logit: str | None = "logit"
    y: str | None = "y"
    weight: str | None = "weight"
    features: tuple[str, ...] | None = None


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} has unparseable value {cell!r}") from None


def _parse_binary(cell: str, row: int, col: str) -> int:
    v = _parse_float(cell, row, col)
    if v not in (0.0, 1.0):
        raise DataError(f"row {row}: column {col!r} must be 0 or 1, got {cell!r}")
    return int(v)


def load_csv_with_weights(path, schema: CsvSchema = CsvSchema()) -> tuple[Dataset, np.ndarray | None]:
    """Like :func:`load_csv` but also returns the weight column when present."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: no data rows") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    col = {h: j for j, h in enumerate(header)}
    for required in (schema.s, schema.yhat):
        if required not in col:
            raise DataError(f"{path}: missing column {required!r}")
    optional = {k: c for k, c in (("logit", schema.logit), ("y", schema.y), ("weight", schema.weight))
                if c is not None and c in col}
    roles = {schema.s, schema.yhat, *optional.values()}
    if schema.features is None:
        features = tuple(h for h in header if h not in roles)
    else:
        features = tuple(schema.features)
        for f in features:
            if f not in col:
                raise DataError(f"{path}: missing column {f!r}")

    X = np.empty((len(rows), len(features)))
    S = np.empty(len(rows), dtype=np.int8)
    Yhat = np.empty(len(rows), dtype=np.int8)
    extra = {k: np.empty(len(rows)) for k in optional}
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"row {i}: expected {len(header)} cells, got {len(r)}")
        for j, f in enumerate(features):
            X[i, j] = _parse_float(r[col[f]], i, f)
        S[i] = _parse_binary(r[col[schema.s]], i, schema.s)
        Yhat[i] = _parse_binary(r[col[schema.yhat]], i, schema.yhat)
        for k, c in optional.items():
            extra[k][i] = (_parse_binary(r[col[c]], i, c) if k == "y"
                           else _parse_float(r[col[c]], i, c))
    data = Dataset(X=X, S=S, Yhat=Yhat, logits=extra.get("logit"), Y=extra.get("y"),
                   feature_names=features)
    return data, extra.get("weight")


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    """Read a CSV with a header row into a :class:`Dataset`, preserving row order."""
    return load_csv_with_weights(path, schema)[0]


def write_csv(path, data: Dataset | WeightedDistribution, schema: CsvSchema = CsvSchema()) -> None:
    """Write a dataset (plus a weight column for weighted distributions).

    Floats are written with ``repr`` so the file round-trips exactly.
    """
    weights = None
    if isinstance(data, WeightedDistribution):
        data, weights = data.base, data.weights
    header = list(data.feature_names) + [schema.s, schema.yhat]
    cols: list[Sequence] = [data.X[:, j] for j in range(data.d)] + [data.S, data.Yhat]
    for name, values in ((schema.logit, data.logits), (schema.y, data.Y), (schema.weight, weights)):
        if values is not None and name is not None:
            header.append(name)
            cols.append(values)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            w.writerow([repr(float(c[i])) if isinstance(c[i], np.floating) else int(c[i]) for c in cols])


def schema_from_mapping(m: Mapping[str, object] | None) -> CsvSchema:
    if not m:
        return CsvSchema()
    kw = dict(m)
    if kw.get("features") is not None:
        kw["features"] = tuple(kw["features"])
    return CsvSchema(**kw)
