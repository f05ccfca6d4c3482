"""Resampling audit of a submitted sample against the full reference data.

For a distance ``d`` the observed value is ``d(sample, reference)`` on a
sample drawn from the submitted distribution. Its null distribution comes from
size-matched samples of the reference itself. Distance tests reject when the
observed value exceeds the upper ``1 - alpha`` null quantile; the KS test
uses its own asymptotic p-value.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, WeightedDistribution, bin_histogram, sample_fraction
from .divergences import (BIN_POINTS, DEFAULT_MAX_ATOMS, Scaler, _atom_keys, _gauss, kl_sy, ks_two_sample,
                          median_pairwise_distance, mmd_sy, wasserstein_exact, wasserstein_sy)

logger = logging.getLogger(__name__)

# reporting order
TEST_ORDER = ("KL(X,S,Yhat)", "KL(S,Yhat)", "W(X,S,Yhat)", "W(S,Yhat)", "KS(Yhat)",
              "MMD(X,S,Yhat)", "MMD(S,Yhat)")
# evaluation order when a single rejection settles the outcome (cheapest first)
_CHEAP_FIRST = ("KL(S,Yhat)", "W(S,Yhat)", "MMD(S,Yhat)", "KS(Yhat)", "KL(X,S,Yhat)",
                "MMD(X,S,Yhat)", "W(X,S,Yhat)")

SYMBOL_BOTH = "-"       # accepted at every fraction
SYMBOL_LARGEST = "o"    # accepted only at the largest fraction
SYMBOL_DETECTED = "@"   # rejected at every fraction
SYMBOL_OTHER = "~"      # any other mixed pattern


@dataclass(frozen=True)
class AuditConfig:
    alpha: float = 0.05
    n_ref: int = 200
    sample_fractions: tuple[float, ...] = (0.1, 0.2)
    max_tries: int = 30
    statistics: tuple[str, ...] = TEST_ORDER
    seed: int = 0
    two_sided: bool = False
    atol: float = 1e-12  # slack on the quantile comparison for round-off

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_ref < 50:
            raise ValueError("n_ref must be at least 50")
        if not all(0 < f <= 1 for f in self.sample_fractions):
            raise ValueError("sample fractions must lie in (0, 1]")
        unknown = set(self.statistics) - set(TEST_ORDER)
        if unknown:
            raise ValueError(f"unknown statistics {sorted(unknown)}")
        object.__setattr__(self, "sample_fractions", tuple(float(f) for f in self.sample_fractions))
        object.__setattr__(self, "statistics", tuple(s for s in TEST_ORDER if s in self.statistics))


@dataclass(frozen=True)
class TestOutcome:
    name: str
    observed: float
    lower: float  # null quantile bounds of the acceptance region
    upper: float
    reject: bool
    p_proxy: float  # share of null values >= observed (or the KS p-value)

    @property
    def decision(self) -> str:
        return "reject" if self.reject else "accept"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decision"] = self.decision
        return {k: (_jsonable(v)) for k, v in d.items()}


@dataclass(frozen=True)
class BatteryOutcome:
    """Outcomes of one sample. Tests skipped after an earlier rejection are
    absent from ``tests``."""

    tests: dict
    fraction: float
    try_index: int
    complete: bool = True  # every enabled test was evaluated

    @property
    def accepted(self) -> bool:
        return self.complete and len(self.tests) > 0 and all(not t.reject for t in self.tests.values())

    @property
    def rejected_by(self) -> list[str]:
        return [k for k in TEST_ORDER if k in self.tests and self.tests[k].reject]

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "try": self.try_index, "accepted": self.accepted,
                "tests": {k: self.tests[k].to_dict() for k in TEST_ORDER if k in self.tests}}


@dataclass
class FractionResult:
    fraction: float
    detected: bool
    tries_used: int
    outcome: BatteryOutcome  # first fully accepted sample, or the last one drawn
    test_accepted: dict  # per test: accepted on some try


@dataclass
class AuditReport:
    fractions: list[FractionResult] = field(default_factory=list)

    @property
    def detected(self) -> bool:
        """Detected when every fraction's retries were all rejected."""
        return all(f.detected for f in self.fractions)

    @property
    def tries_used(self) -> dict:
        return {f.fraction: f.tries_used for f in self.fractions}

    def symbols(self) -> dict:
        """Per test: ``-`` undetected at every fraction, ``o`` undetected only at
        the largest fraction, ``@`` detected at every fraction."""
        out = {}
        fr = sorted(self.fractions, key=lambda f: f.fraction)
        for name in TEST_ORDER:
            acc = [f.test_accepted.get(name) for f in fr]
            if any(a is None for a in acc):
                continue
            if all(acc):
                out[name] = SYMBOL_BOTH
            elif not any(acc):
                out[name] = SYMBOL_DETECTED
            elif acc[-1] and not any(acc[:-1]):
                out[name] = SYMBOL_LARGEST
            else:
                out[name] = SYMBOL_OTHER
        return out

    def to_dict(self) -> dict:
        return {
            "detected": self.detected,
            "symbols": self.symbols(),
            "fractions": [
                {"fraction": f.fraction, "detected": f.detected, "tries_used": f.tries_used,
                 "test_accepted": f.test_accepted, "outcome": f.outcome.to_dict()}
                for f in self.fractions
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_text(self) -> str:
        fr = sorted(self.fractions, key=lambda f: f.fraction)
        head = ["test"] + [f"{f.fraction:.0%}" for f in fr] + ["symbol"]
        sym = self.symbols()
        rows = []
        for name in TEST_ORDER:
            if name not in sym:
                continue
            rows.append([name] + ["accept" if f.test_accepted[name] else "reject" for f in fr] + [sym[name]])
        rows.append(["battery"] + ["undetected" if not f.detected else "detected" for f in fr] + [""])
        rows.append(["tries"] + [str(f.tries_used) for f in fr] + [""])
        return _table(head, rows)


def _table(head, rows) -> str:
    widths = [max(len(str(r[j])) for r in [head, *rows]) for j in range(len(head))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return None
        return v
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _empirical_quantile(sorted_vals: np.ndarray, q: float) -> float:
    """Smallest null value with empirical CDF >= q."""
    return float(np.quantile(sorted_vals, q, method="inverted_cdf"))


class Auditor:
    """Holds the reference data and everything derived from it: the feature
    scaler, kernel bandwidths, and cached null distributions."""

    def __init__(self, reference: Dataset, cfg: AuditConfig = AuditConfig()):
        self.ref = reference
        self.cfg = cfg
        self.scaler = Scaler.fit(reference.X)
        self.ref_emb = self.scaler.embed(reference)
        self.ref_hist = bin_histogram(reference)
        keys = _atom_keys(reference.records())
        self._ref_keys, ref_counts = np.unique(keys, return_counts=True)
        self._ref_mass = ref_counts / reference.n
        # bandwidths come from the reference so null and observed use one kernel
        rng = np.random.default_rng([cfg.seed, 7919])
        sub = self.ref_emb if reference.n <= 2000 else self.ref_emb[rng.choice(reference.n, 2000, replace=False)]
        self.bw_full = median_pairwise_distance(sub)
        sy_pts = BIN_POINTS
        self.bw_sy = median_pairwise_distance(sy_pts, weights=np.round(self.ref_hist * reference.n))
        self._Kref_mean_full = None
        self._nulls: dict = {}

    # statistics ------------------------------------------------------------

    def _ref_kernel_term(self) -> float:
        if self._Kref_mean_full is None:
            R = self.ref_emb
            total = 0.0
            for start in range(0, R.shape[0], 1000):
                total += _gauss(R[start:start + 1000], R, self.bw_full).sum()
            self._Kref_mean_full = total / R.shape[0] ** 2
        return self._Kref_mean_full

    def statistic(self, name: str, sample: Dataset) -> float | tuple[float, float]:
        if name == "KL(X,S,Yhat)":
            keys, counts = np.unique(_atom_keys(sample.records()), return_counts=True)
            pos = np.searchsorted(self._ref_keys, keys)
            pos = np.clip(pos, 0, self._ref_keys.size - 1)
            if np.any(self._ref_keys[pos] != keys):
                return math.inf
            p = counts / sample.n
            return max(float(np.sum(p * np.log(p / self._ref_mass[pos]))), 0.0)
        if name == "KL(S,Yhat)":
            return kl_sy(bin_histogram(sample), self.ref_hist)
        if name == "W(X,S,Yhat)":
            return wasserstein_exact(self.scaler.embed(sample), self.ref_emb,
                                     max_atoms=max(DEFAULT_MAX_ATOMS, self.ref.n))[0]
        if name == "W(S,Yhat)":
            return wasserstein_sy(bin_histogram(sample), self.ref_hist)
        if name == "MMD(X,S,Yhat)":
            E = self.scaler.embed(sample)
            kxx = _gauss(E, E, self.bw_full).mean()
            kxy = _gauss(E, self.ref_emb, self.bw_full).mean()
            return max(float(kxx + self._ref_kernel_term() - 2 * kxy), 0.0)
        if name == "MMD(S,Yhat)":
            return mmd_sy(bin_histogram(sample), self.ref_hist, self.bw_sy)
        if name == "KS(Yhat)":
            if sample.logits is not None and self.ref.logits is not None:
                return ks_two_sample(sample.logits, self.ref.logits)
            return ks_two_sample(sample.Yhat, self.ref.Yhat)
        raise KeyError(name)

    def null_distribution(self, name: str, sample_size: int, replacement: bool = False,
                          B: int | None = None) -> np.ndarray:
        """Sorted ``d(sample_b, reference)`` over ``B`` reference subsamples of
        ``sample_size`` rows. Cached per (statistic, size, replacement, B)."""
        if name == "KS(Yhat)":
            raise ValueError("the KS test uses its asymptotic p-value, not a resampled null")
        B = self.cfg.n_ref if B is None else B
        if B < 1:
            raise ValueError("B must be positive")
        if sample_size > self.ref.n and not replacement:
            raise ValueError(f"sample size {sample_size} exceeds reference size {self.ref.n}")
        key = (name, int(sample_size), bool(replacement), int(B))
        if key not in self._nulls:
            seed = [self.cfg.seed, TEST_ORDER.index(name), int(sample_size), int(replacement), int(B)]
            rng = np.random.default_rng(seed)
            n = self.ref.n
            vals = np.empty(B)
            for b in range(B):
                idx = rng.choice(n, size=sample_size, replace=True) if replacement \
                    else rng.permutation(n)[:sample_size]
                vals[b] = self.statistic(name, self.ref.take(idx))
            vals.sort()
            self._nulls[key] = vals
        return self._nulls[key]

    def test(self, name: str, sample: Dataset, replacement: bool = False) -> TestOutcome:
        alpha = self.cfg.alpha
        if name == "KS(Yhat)":
            D, p = self.statistic(name, sample)
            return TestOutcome(name, D, -math.inf, math.inf, bool(p < alpha), p)
        obs = self.statistic(name, sample)
        null = self.null_distribution(name, sample.n, replacement)
        return test_sample(name, obs, null, alpha, two_sided=self.cfg.two_sided, atol=self.cfg.atol)

    # battery ---------------------------------------------------------------

    def evaluate(self, sample: Dataset, replacement: bool, needed: set | None = None,
                 fraction: float = float("nan"), try_index: int = 0):
        """Run tests on one sample, cheapest first.

        After the first rejection only tests listed in ``needed`` are still run.
        """
        tests = {}
        rejected = False
        for name in _CHEAP_FIRST:
            if name not in self.cfg.statistics:
                continue
            if rejected and (needed is None or name not in needed):
                continue
            out = self.test(name, sample, replacement)
            tests[name] = out
            rejected = rejected or out.reject
        complete = all(n in tests for n in self.cfg.statistics)
        return BatteryOutcome(tests, fraction, try_index, complete=complete)

    def run_battery(self, manipulated, rng: np.random.Generator | None = None,
                    max_tries: int | None = None, per_test: bool = True,
                    fractions=None, replacement: bool | None = None) -> AuditReport:
        """Draw up to ``max_tries`` samples per fraction from ``manipulated``,
        stopping at the first sample that passes every test.

        With ``per_test`` each test keeps being evaluated until it has accepted
        once, which gives the per-test detection symbols.
        """
        cfg = self.cfg
        max_tries = cfg.max_tries if max_tries is None else max_tries
        fractions = cfg.sample_fractions if fractions is None else tuple(fractions)
        if isinstance(manipulated, Dataset):
            manipulated = manipulated.uniform()
        repl = (not manipulated.is_uniform()) if replacement is None else replacement
        seeds = np.random.SeedSequence(cfg.seed if rng is None else int(rng.integers(2**63)))
        report = AuditReport()
        for f, ss in zip(fractions, seeds.spawn(len(fractions))):
            frng = np.random.default_rng(ss)
            accepted_ever = {name: False for name in cfg.statistics}
            outcome = None
            detected = True
            tries = 0
            for j in range(1, max_tries + 1):
                tries = j
                sample = sample_fraction(manipulated, f, frng, replacement=repl)
                needed = {k for k, v in accepted_ever.items() if not v} if per_test else set()
                outcome = self.evaluate(sample, repl, needed, f, j)
                for name, t in outcome.tests.items():
                    accepted_ever[name] |= not t.reject
                if outcome.accepted:
                    detected = False
                    break
            report.fractions.append(FractionResult(f, detected, tries, outcome, accepted_ever))
        return report


def test_sample(name: str, observed: float, null_values, alpha: float = 0.05,
                two_sided: bool = False, atol: float = 1e-12) -> TestOutcome:
    """Decision for a distance statistic against its sorted null values.

    Rejects iff ``observed`` lies above the upper ``1 - alpha`` quantile
    (``1 - alpha/2`` and also below ``alpha/2`` when two-sided). The
    acceptance region is closed; ``inf`` always rejects.
    """
    null = np.sort(np.asarray(null_values, dtype=float))
    if null.size == 0:
        raise ValueError("empty null distribution")
    if two_sided:
        lo, hi = _empirical_quantile(null, alpha / 2), _empirical_quantile(null, 1 - alpha / 2)
    else:
        lo, hi = -math.inf, _empirical_quantile(null, 1 - alpha)
    slack = atol * max(1.0, abs(hi)) if math.isfinite(hi) else 0.0
    if math.isinf(observed) and observed > 0:
        reject = True
    else:
        reject = observed > hi + slack or (two_sided and observed < lo - atol * max(1.0, abs(lo)))
    p = float(np.mean(null >= observed - slack)) if math.isfinite(observed) else 0.0
    return TestOutcome(name, float(observed), float(lo), float(hi), bool(reject), p)


def null_distribution(reference: Dataset, stat: str, sample_size: int, B: int,
                      rng: np.random.Generator, replacement: bool = False) -> np.ndarray:
    """Stand-alone null: sorted statistic values of ``B`` size-matched
    reference subsamples (without replacement by default)."""
    aud = Auditor(reference, AuditConfig(n_ref=max(B, 50), seed=int(rng.integers(2**31))))
    n = reference.n
    if sample_size > n and not replacement:
        raise ValueError(f"sample size {sample_size} exceeds reference size {n}")
    if stat == "KS(Yhat)":
        raise ValueError("the KS test uses its asymptotic p-value, not a resampled null")
    vals = np.empty(B)
    for b in range(B):
        idx = rng.choice(n, size=sample_size, replace=True) if replacement else rng.permutation(n)[:sample_size]
        vals[b] = aud.statistic(stat, reference.take(idx))
    return np.sort(vals)


def run_battery(manipulated, reference: Dataset, model=None, cfg: AuditConfig = AuditConfig(),
                auditor: Auditor | None = None) -> tuple[AuditReport, dict]:
    """Battery of the seven tests with retries. Returns the report and the
    number of tries used per fraction."""
    if model is not None and reference.logits is None:
        reference = model.annotate(reference)
    aud = auditor if auditor is not None else Auditor(reference, cfg)
    base = manipulated.base if isinstance(manipulated, WeightedDistribution) else manipulated
    if base.d != reference.d:
        raise ValueError(f"schema mismatch: {base.d} features vs {reference.d} in the reference")
    report = aud.run_battery(manipulated)
    return report, report.tries_used


@dataclass
class SearchReport:
    method: str
    grid: list[float]
    highest: dict  # fraction -> highest undetected target (None when none)
    cells: list[dict]  # per (target, fraction): status, achieved DI, tries

    def to_dict(self) -> dict:
        return {"method": self.method, "grid": self.grid,
                "highest": {str(k): v for k, v in self.highest.items()}, "cells": self.cells}


def format_highest(v) -> str:
    return "--" if v is None else f"{v:.3f}"


def search_highest_undetected(reference: Dataset, manipulate, method: str, cfg: AuditConfig,
                              di_grid, auditor: Auditor | None = None, max_tries: int = 100,
                              original_di: float | None = None) -> SearchReport:
    """Largest grid target whose manipulated distribution passes the battery.

    ``manipulate(target)`` returns a ``ManipulationResult``; a raised exception
    marks that grid point as failed. Each (target, fraction) cell has its own
    random stream, so scanning from the top and stopping at the first pass gives
    the same answer as scanning the whole grid.
    """
    from .data import disparate_impact

    grid = [float(g) for g in di_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("di_grid must be strictly ascending")
    di0 = disparate_impact(reference) if original_di is None else original_di
    if not grid or grid[0] <= di0:
        raise ValueError(f"di_grid must start above the reference DI {di0:.4g}")
    aud = auditor if auditor is not None else Auditor(reference, cfg)
    highest = {f: None for f in cfg.sample_fractions}
    cells = []
    results = {}
    for gi in range(len(grid) - 1, -1, -1):
        open_fracs = [f for f in cfg.sample_fractions if highest[f] is None]
        if not open_fracs:
            break
        target = grid[gi]
        if gi not in results:
            try:
                results[gi] = manipulate(target)
            except Exception as exc:  # recorded as a failed grid point
                logger.info("%s failed at target %.3f: %s", method, target, exc)
                results[gi] = exc
        res = results[gi]
        for f in open_fracs:
            if isinstance(res, Exception):
                cells.append({"target": target, "fraction": f, "status": "failed", "error": str(res)})
                continue
            fi = cfg.sample_fractions.index(f)
            ss = np.random.SeedSequence([cfg.seed, gi, fi, 104729])
            rng = np.random.default_rng(ss)
            rep = aud.run_battery(res.data, rng=rng, max_tries=max_tries, per_test=False, fractions=(f,))
            fr = rep.fractions[0]
            cells.append({"target": target, "fraction": f, "achieved_di": _jsonable(res.achieved_di),
                          "status": "detected" if fr.detected else "undetected", "tries": fr.tries_used})
            if not fr.detected:
                highest[f] = target
    cells.sort(key=lambda c: (c["target"], c["fraction"]))
    return SearchReport(method, grid, highest, cells)
