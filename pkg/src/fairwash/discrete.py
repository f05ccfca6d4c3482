"""Greedy discrete manipulations.

``replace_greedy`` rewrites ``(S, Yhat)`` of individuals by moving them
between the four bins; ``match_greedy`` overwrites whole records with copies
of existing records, trading fairness gain against displacement.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .data import Dataset, GroupCounts, UndefinedMetricError, disparate_impact
from .ot_projection import ManipulationResult


class StuckError(RuntimeError):
    """No admissible move improves the objective before the target is met."""


@dataclass(frozen=True)
class AdmissibleMove:
    """Move between ``(s, yhat)`` bins."""

    from_bin: tuple[int, int]
    to_bin: tuple[int, int]

    def __post_init__(self):
        if (self.from_bin, self.to_bin) not in _ADMISSIBLE_PAIRS:
            raise ValueError(f"move {self.from_bin}->{self.to_bin} is not admissible")

    @property
    def name(self) -> str:
        return "s{}y{}->s{}y{}".format(*self.from_bin, *self.to_bin)


_ADMISSIBLE_PAIRS = (
    ((0, 0), (0, 1)),  # group 0 negative becomes positive
    ((1, 1), (0, 1)),  # group 1 positive relabelled into group 0
    ((0, 0), (1, 0)),  # group 0 negative relabelled into group 1
)
ADMISSIBLE_MOVES = tuple(AdmissibleMove(a, b) for a, b in _ADMISSIBLE_PAIRS)


@dataclass(frozen=True)
class MoveEntry:
    step: int
    rows: tuple[int, ...]
    move: str
    metric_before: float
    metric_after: float
    sources: tuple[int, ...] = ()  # copied record index per row (matching only)
    displacement: float = 0.0


@dataclass
class MoveLog:
    metric: str = "DI"
    entries: list[MoveEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def total_displacement(self) -> float:
        return float(sum(e.displacement for e in self.entries))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "row", "move", "source", f"{self.metric.lower()}_before",
                        f"{self.metric.lower()}_after", "displacement"])
            for e in self.entries:
                srcs = e.sources or ("",) * len(e.rows)
                share = e.displacement / len(e.rows) if e.rows else 0.0
                for r, src in zip(e.rows, srcs):
                    w.writerow([e.step, r, e.move, src, repr(float(e.metric_before)),
                                repr(float(e.metric_after)), repr(float(share))])


def _bin_di(b) -> float:
    """DI of bin counts ``b`` in ``(0,0), (0,1), (1,0), (1,1)`` order; nan when
    a group is empty."""
    n0, n1 = b[0] + b[1], b[2] + b[3]
    if n0 <= 0 or n1 <= 0:
        return math.nan
    return disparate_impact(GroupCounts(n0, n1, b[1], b[3]))


def _code(s, y) -> int:
    return 2 * s + y


def replace_greedy(data: Dataset, t: float, speed: int = 1) -> ManipulationResult:
    """Raise DI to at least ``t`` by rewriting ``(S, Yhat)`` of individuals.

    Each step applies the admissible move with the largest DI after moving
    ``speed`` individuals (fewer if the source bin runs short). Within a bin
    the lowest row indices are rewritten first.
    """
    if speed < 1:
        raise ValueError("speed must be a positive integer")
    codes = _code(data.S.astype(np.intp), data.Yhat.astype(np.intp))
    b = np.bincount(codes, minlength=4).astype(np.int64)
    di0 = _bin_di(b)
    if math.isnan(di0):
        raise UndefinedMetricError("DI undefined: one sensitive group is empty")
    members = [list(np.flatnonzero(codes == c)) for c in range(4)]
    log = MoveLog("DI")
    di = di0
    step = 0
    while di < t:
        best = None
        for mv in ADMISSIBLE_MOVES:
            src, dst = _code(*mv.from_bin), _code(*mv.to_bin)
            k = min(speed, int(b[src]))
            if k == 0:
                continue
            nb = b.copy()
            nb[src] -= k
            nb[dst] += k
            cand = _bin_di(nb)
            if not math.isnan(cand) and (best is None or cand > best[0]):
                best = (cand, mv, src, dst, k)
        if best is None or best[0] <= di:
            raise StuckError(f"stuck below target: DI={di:.6g} < {t} with bins {b.tolist()}")
        cand, mv, src, dst, k = best
        rows = members[src][:k]
        del members[src][:k]
        members[dst] = sorted(members[dst] + rows)
        b[src] -= k
        b[dst] += k
        step += 1
        disp = float(k * sum(abs(x - y) for x, y in zip(mv.from_bin, mv.to_bin)))
        log.entries.append(MoveEntry(step, tuple(int(r) for r in rows), mv.name, di, cand,
                                     displacement=disp))
        di = cand
    S = data.S.copy()
    Y = data.Yhat.copy()
    moved = []
    for e in log:
        mv = next(m for m in ADMISSIBLE_MOVES if m.name == e.move)
        idx = list(e.rows)
        S[idx], Y[idx] = mv.to_bin
        moved.extend(idx)
    # the rewritten outcomes no longer derive from the scores, so scores are dropped
    out = data.replace(S=S, Yhat=Y, logits=None)
    return ManipulationResult(
        method="Replace", data=out, original_di=di0, achieved_di=di, target_di=t,
        moves=log.entries, modified_rows=np.array(sorted(moved), dtype=np.intp),
        info={"log": log, "speed": speed, "bins": b.tolist()},
    )


def equality_of_odds(data: Dataset) -> float:
    """``|P(Yhat=1 | S=1, Y=1) - P(Yhat=1 | S=0, Y=1)|``."""
    if data.Y is None:
        raise UndefinedMetricError("EoO undefined: no ground-truth labels")
    rates = []
    for s in (0, 1):
        m = (data.S == s) & (data.Y == 1)
        if not m.any():
            raise UndefinedMetricError(f"EoO undefined: no rows with S={s}, Y=1")
        rates.append(float(np.mean(data.Yhat[m])))
    return abs(rates[1] - rates[0])


def _eoo_counts(c) -> float:
    """EoO from counts indexed by ``4 s + 2 yhat + y``; nan if undefined."""
    r = []
    for s in (0, 1):
        pos, tot = c[4 * s + 3], c[4 * s + 1] + c[4 * s + 3]
        if tot <= 0:
            return math.nan
        r.append(pos / tot)
    return abs(r[1] - r[0])


def match_greedy(data: Dataset, t: float, objective: str = "DI", max_steps: int | None = None) -> ManipulationResult:
    """Copy existing records onto others until the objective reaches ``t``.

    Every step picks the pair ``(i, k)`` maximising the objective gain of
    setting record ``i`` to original record ``k``, divided by the Euclidean
    displacement on ``(X, S, Yhat)`` (plus ``Y`` for the EoO objective). The
    gain only depends on the bins of ``i`` and ``k``, so the best ``k`` for a
    given ``i`` and target bin is its nearest neighbour there.

    ``objective="DI"`` stops at ``DI >= t``; ``objective="EoO"`` at ``EoO <= t``.
    ``max_steps`` truncates the run early (``info["converged"]`` is then False).
    """
    if data.n < 2:
        raise ValueError("matching needs at least two records")
    eoo = objective.upper() == "EOO"
    if not eoo and objective.upper() != "DI":
        raise ValueError(f"unknown objective {objective!r}")
    if eoo and data.Y is None:
        raise UndefinedMetricError("EoO undefined: no ground-truth labels")

    parts = [data.X, data.S[:, None], data.Yhat[:, None]]
    if eoo:
        parts.append(data.Y[:, None])
    orig = np.hstack(parts).astype(float)
    cur = orig.copy()
    S = data.S.astype(np.intp)
    Yh = data.Yhat.astype(np.intp)
    if eoo:
        ocode = 4 * S + 2 * Yh + data.Y.astype(np.intp)
        nb, metric = 8, _eoo_counts
    else:
        ocode = 2 * S + Yh
        nb, metric = 4, _bin_di
    ccode = ocode.copy()
    counts = np.bincount(ccode, minlength=nb).astype(np.int64)
    m0 = metric(counts)
    if math.isnan(m0):
        raise UndefinedMetricError(f"{'EoO' if eoo else 'DI'} undefined on the input data")

    def done(m):
        return m <= t if eoo else m >= t

    trees = [cKDTree(orig[ocode == c]) if np.any(ocode == c) else None for c in range(nb)]
    pool_idx = [np.flatnonzero(ocode == c) for c in range(nb)]

    def nearest(rows):
        dist = np.full((rows.size, nb), np.inf)
        arg = np.full((rows.size, nb), -1, dtype=np.intp)
        for c, tree in enumerate(trees):
            if tree is None:
                continue
            d, j = tree.query(cur[rows])
            dist[:, c] = d
            arg[:, c] = pool_idx[c][j]
        return dist, arg

    all_rows = np.arange(data.n)
    dist, arg = nearest(all_rows)

    log = MoveLog("EoO" if eoo else "DI")
    m = m0
    step = 0
    limit = 10 * data.n
    while not done(m):
        if max_steps is not None and step >= max_steps:
            break
        if step >= limit:
            raise StuckError(f"no convergence after {limit} matching steps")
        # gain for every (source bin, target bin)
        gain = np.full((nb, nb), -np.inf)
        for a in range(nb):
            if counts[a] == 0:
                continue
            for b_ in range(nb):
                if a == b_ or trees[b_] is None:
                    continue
                c2 = counts.copy()
                c2[a] -= 1
                c2[b_] += 1
                v = metric(c2)
                if math.isnan(v):
                    continue
                gain[a, b_] = (m - v) if eoo else (v - m)
        g = gain[ccode]  # (n, nb)
        with np.errstate(divide="ignore", invalid="ignore"):
            score = np.where(g > 0, np.where(dist > 0, g / dist, np.inf), -np.inf)
        flat = int(np.argmax(score))
        i, c = divmod(flat, nb)
        if not score[i, c] > -np.inf:
            raise StuckError(f"stuck below target: no record copy improves the objective ({m:.6g})")
        k = int(arg[i, c])
        disp = float(dist[i, c])
        before = m
        counts[ccode[i]] -= 1
        counts[c] += 1
        ccode[i] = c
        cur[i] = orig[k]
        m = metric(counts)
        step += 1
        log.entries.append(MoveEntry(step, (i,), f"copy->{c}", before, m, (k,), disp))
        d_i, a_i = nearest(np.array([i]))
        dist[i], arg[i] = d_i[0], a_i[0]

    # assemble the rewritten dataset (whole records copied)
    src = np.arange(data.n)
    for e in log:
        src[e.rows[0]] = e.sources[0]
    out = data.take(src)
    modified = np.flatnonzero(src != np.arange(data.n))
    achieved_di = disparate_impact(out)
    return ManipulationResult(
        method="Matching_EoO" if eoo else "Matching", data=out, original_di=disparate_impact(data),
        achieved_di=achieved_di, target_di=t, moves=log.entries, modified_rows=modified,
        info={"log": log, "objective": "EoO" if eoo else "DI", "metric_before": m0, "metric_after": m,
              "sources": src, "converged": bool(done(m))},
    )
