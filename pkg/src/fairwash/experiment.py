"""End-to-end runs: train, manipulate at each target, measure, audit, search."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .audit import TEST_ORDER, AuditConfig, Auditor, format_highest, search_highest_undetected, _jsonable
from .data import CsvSchema, Dataset, WeightedDistribution, bin_histogram, disparate_impact, load_csv, \
    schema_from_mapping
from .discrete import equality_of_odds
from .divergences import DEFAULT_MAX_ATOMS, _gauss, kl_atoms, kl_sy, mmd_sy, wasserstein_exact, wasserstein_sy
from .methods import DI_METHODS, METHODS, canonical, manipulate
from .model import Classifier, TrainConfig, fit, select_threshold
from .synthetic import SyntheticSpec, gen_synthetic

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
OUT_ENV = "FAIRWASH_OUT"
METRICS = ("W(X,S,Yhat)", "W(S,Yhat)", "KL(X,S,Yhat)", "KL(S,Yhat)", "MMD(X,S,Yhat)", "MMD(S,Yhat)")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    csv_path: str | None = None
    schema: CsvSchema = field(default_factory=CsvSchema)
    model: TrainConfig = field(default_factory=TrainConfig)
    methods: tuple[str, ...] = METHODS
    grid: tuple[float, ...] = (0.35, 0.45, 0.55, 0.65, 0.75, 0.8)
    audit: AuditConfig = field(default_factory=AuditConfig)
    search_tries: int = 100
    eoo_target: float = 0.05
    speed: int = 1
    seed: int = 0
    out_dir: str | None = None
    svg: bool = False
    workers: int = 1
    battery: bool = True
    search: bool = True

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(canonical(m) for m in self.methods))
        g = tuple(float(x) for x in self.grid)
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ConfigError("grid must be strictly ascending")
        object.__setattr__(self, "grid", g)
        if (self.synthetic is None) == (self.csv_path is None):
            raise ConfigError("exactly one data source (synthetic or csv) is required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


def _pick(d: dict, cls, where: str):
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return d


def config_from_mapping(m: dict) -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from nested mappings (as read from YAML)."""
    m = dict(m or {})
    version = m.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
    seed = int(m.pop("seed", 0))
    data = m.pop("data", {"synthetic": {}}) or {"synthetic": {}}
    kw: dict = {"seed": seed}
    if "csv" in data:
        kw["synthetic"] = None
        kw["csv_path"] = str(data["csv"])
        kw["schema"] = schema_from_mapping(data.get("schema"))
    else:
        syn = _pick(dict(data.get("synthetic") or {}), SyntheticSpec, "data.synthetic")
        syn.setdefault("seed", seed)
        if "means" in syn and syn["means"] is not None:
            syn["means"] = tuple(map(tuple, np.asarray(syn["means"], dtype=float).tolist()))
        kw["synthetic"] = SyntheticSpec(**syn)
    if "model" in m:
        mod = _pick(dict(m.pop("model") or {}), TrainConfig, "model")
        if "hidden" in mod:
            mod["hidden"] = tuple(int(h) for h in mod["hidden"])
        kw["model"] = TrainConfig(**mod)
    if "audit" in m:
        a = dict(m.pop("audit") or {})
        if "search_tries" in a:
            kw["search_tries"] = int(a.pop("search_tries"))
        if "fractions" in a:
            a["sample_fractions"] = tuple(a.pop("fractions"))
        if "statistics" in a:
            a["statistics"] = tuple(a["statistics"])
        a.setdefault("seed", seed)
        kw["audit"] = AuditConfig(**_pick(a, AuditConfig, "audit"))
    else:
        kw["audit"] = AuditConfig(seed=seed)
    out = m.pop("output", {}) or {}
    if "dir" in out:
        kw["out_dir"] = str(out["dir"])
    if "svg" in out:
        kw["svg"] = bool(out["svg"])
    for key in ("methods", "grid"):
        if key in m:
            kw[key] = tuple(m.pop(key))
    for key in ("eoo_target", "speed", "workers", "battery", "search"):
        if key in m:
            kw[key] = m.pop(key)
    if m:
        raise ConfigError(f"unknown config keys: {sorted(m)}")
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_mapping(yaml.safe_load(fh))


def resolve_out_dir(explicit: str | None) -> Path:
    return Path(explicit or os.environ.get(OUT_ENV) or "fairwash-out")


# model + reference ---------------------------------------------------------

def prepare_reference(data: Dataset, train_cfg: TrainConfig, rng: np.random.Generator) -> tuple[Dataset, Classifier]:
    """Train on ``(X, Y)``, pick the rate-matching threshold, and replace
    ``Yhat``/``logits`` by the model's."""
    model = fit(data, train_cfg, rng)
    th = select_threshold(model.predict_logits(data.X), data.Y)
    model = model.with_threshold(th)
    return model.annotate(data), model


# distances to the original -------------------------------------------------

def distance_metrics(q, aud: Auditor) -> dict:
    """Distances between a manipulated distribution and the audited reference.

    Covariates are standardised with the reference scaler; MMD uses the
    reference bandwidths.
    """
    if isinstance(q, WeightedDistribution):
        base, w = q.base, q.weights
    else:
        base, w = q, np.full(q.n, 1.0 / q.n)
    keep = w > 0
    emb = aud.scaler.embed(base)[keep]
    w = w[keep] / w[keep].sum()
    ref = aud.ref_emb
    rw = np.full(ref.shape[0], 1.0 / ref.shape[0])
    out = {}
    out["W(X,S,Yhat)"] = wasserstein_exact((emb, w), (ref, rw),
                                           max_atoms=max(DEFAULT_MAX_ATOMS, ref.shape[0], emb.shape[0]))[0]
    h = bin_histogram(q)
    out["W(S,Yhat)"] = wasserstein_sy(h, aud.ref_hist)
    out["KL(X,S,Yhat)"] = kl_atoms((base.records()[keep], w), aud.ref.records())
    out["KL(S,Yhat)"] = kl_sy(h, aud.ref_hist)
    bw = aud.bw_full
    kxx = 0.0
    kxy = 0.0
    for s in range(0, emb.shape[0], 1000):
        blk = slice(s, s + 1000)
        kxx += w[blk] @ _gauss(emb[blk], emb, bw) @ w
        kxy += w[blk] @ _gauss(emb[blk], ref, bw) @ rw
    out["MMD(X,S,Yhat)"] = max(float(kxx + aud._ref_kernel_term() - 2 * kxy), 0.0)
    out["MMD(S,Yhat)"] = mmd_sy(h, aud.ref_hist, aud.bw_sy)
    return {k: float(v) for k, v in out.items()}


# running -------------------------------------------------------------------

@dataclass
class CellResult:
    method: str
    target: float
    status: str  # ok | failed
    achieved_di: float = math.nan
    n_modified: int = 0
    metrics: dict = field(default_factory=dict)
    audit: dict | None = None
    error: str = ""
    eoo: float = math.nan


@dataclass
class ExperimentReport:
    original_di: float
    original_eoo: float
    threshold: float
    cells: list[CellResult]
    searches: dict  # method -> SearchReport
    config: ExperimentConfig
    n: int

    def highest_table(self) -> list[list[str]]:
        fr = self.config.audit.sample_fractions
        rows = []
        for m, rep in self.searches.items():
            rows.append([m] + [format_highest(rep.highest.get(f)) for f in fr])
        return rows


def _cell(method, target, data, model, aud, cfg, midx, gidx) -> CellResult:
    try:
        res = manipulate(method, data, target, model=model, speed=cfg.speed)
    except Exception as exc:  # recorded as a failed cell, the run continues
        logger.info("%s at %.3f failed: %s", method, target, exc)
        return CellResult(method, target, "failed", error=f"{type(exc).__name__}: {exc}")
    cell = CellResult(method, target, "ok", achieved_di=float(res.achieved_di),
                      n_modified=int(len(res.modified_rows)))
    if method != "Matching_EoO" and not res.achieved_di >= target - 1e-12:
        cell.status = "failed"
        cell.error = f"achieved DI {res.achieved_di:.6g} below target"
    cell.metrics = distance_metrics(res.data, aud)
    base = res.data.base if isinstance(res.data, WeightedDistribution) else res.data
    if base.Y is not None and not isinstance(res.data, WeightedDistribution):
        try:
            cell.eoo = equality_of_odds(base)
        except ValueError:
            pass
    if cfg.battery:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, midx, gidx, 17]))
        rep = aud.run_battery(res.data, rng=rng, per_test=True)
        cell.audit = rep.to_dict()
    return cell


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Train, manipulate at every (method, target), measure, audit, and
    search for the highest undetected DI. Writes the report bundle when
    ``write`` is set."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    if cfg.synthetic is not None:
        raw = gen_synthetic(cfg.synthetic, np.random.default_rng(seeds[0]))
    else:
        raw = load_csv(cfg.csv_path, cfg.schema)
    if raw.Y is None:
        raise ConfigError("the source data needs ground-truth labels Y to train the model")
    data, model = prepare_reference(raw, cfg.model, np.random.default_rng(seeds[1]))
    di0 = disparate_impact(data)
    try:
        eoo0 = equality_of_odds(data)
    except ValueError:
        eoo0 = math.nan
    aud = Auditor(data, cfg.audit)

    jobs = []
    for mi, m in enumerate(cfg.methods):
        if m == "Matching_EoO":
            jobs.append((m, cfg.eoo_target, mi, 0))
        else:
            jobs.extend((m, t, mi, gi) for gi, t in enumerate(cfg.grid))

    def run(job):
        m, t, mi, gi = job
        return _cell(m, t, data, model, aud, cfg, mi, gi)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            cells = list(pool.map(run, jobs))
    else:
        cells = [run(j) for j in jobs]

    searches = {}
    if cfg.search:
        grid = [t for t in cfg.grid if t > di0]
        for mi, m in enumerate(cfg.methods):
            if m not in DI_METHODS or not grid:
                continue
            acfg = replace(cfg.audit, seed=cfg.audit.seed * 1000 + mi)
            searches[m] = search_highest_undetected(
                data, lambda t, m=m: manipulate(m, data, t, model=model, speed=cfg.speed),
                m, acfg, grid, auditor=aud, max_tries=cfg.search_tries, original_di=di0)
    report = ExperimentReport(di0, eoo0, model.threshold, cells, searches, cfg, data.n)
    if write:
        write_bundle(report, resolve_out_dir(cfg.out_dir), model)
    return report


# output --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v)


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) if not isinstance(x, int) or isinstance(x, bool) else x for x in r])


def curve_rows(report: ExperimentReport):
    fr = report.config.audit.sample_fractions
    header = ["method", "target", "status", "achieved_di", "n_modified", *METRICS, "eoo"] + \
        [f"detected@{f:g}" for f in fr] + [f"tries@{f:g}" for f in fr]
    rows = []
    for c in report.cells:
        det = [""] * len(fr)
        tries = [""] * len(fr)
        if c.audit is not None:
            for k, f in enumerate(c.audit["fractions"]):
                det[k] = str(f["detected"]).lower()
                tries[k] = str(f["tries_used"])
        rows.append([c.method, c.target, c.status, c.achieved_di, c.n_modified,
                     *[c.metrics.get(k, math.nan) for k in METRICS], c.eoo, *det, *tries])
    return header, rows


def radar_rows(report: ExperimentReport, target: float = 0.8):
    """Per-method metric vector at the grid point closest to ``target``."""
    grid = report.config.grid
    gt = min(grid, key=lambda g: (abs(g - target), -g)) if grid else target
    rows = []
    for c in report.cells:
        if c.status != "ok" or (c.method != "Matching_EoO" and c.target != gt):
            continue
        rows.append([c.method, c.target, c.achieved_di, *[c.metrics[k] for k in METRICS]])
    return ["method", "target", "achieved_di", *METRICS], rows


def _svg_lines(series: dict, title: str, ylabel: str) -> str:
    """Minimal line chart; infinities and failures are omitted."""
    W, H, pad = 640, 400, 50
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(y)]
    if not pts:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}"><text x="10" y="20">{title}: no finite data</text></svg>\n'
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = 0.0, max(p[1] for p in pts) or 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (W - 2 * pad)  # noqa: E731
    sy = lambda y: H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad)  # noqa: E731
    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
           f'<text x="{W / 2}" y="20" text-anchor="middle">{title}</text>',
           f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle">target DI</text>',
           f'<text x="12" y="{H / 2}" transform="rotate(-90 12 {H / 2})" text-anchor="middle">{ylabel}</text>']
    for k, (name, s) in enumerate(series.items()):
        fin = [(x, y) for x, y in s if math.isfinite(y)]
        if not fin:
            continue
        c = colors[k % len(colors)]
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in fin)
        out.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
        out.append(f'<text x="{W - pad + 2}" y="{pad + 14 * k}" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_bundle(report: ExperimentReport, out: Path, model: Classifier | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    h, rows = curve_rows(report)
    _write_csv(out / "curves.csv", h, rows)
    h, rows = radar_rows(report)
    _write_csv(out / "radar.csv", h, rows)
    fr = report.config.audit.sample_fractions
    _write_csv(out / "highest_undetected.csv", ["method", *[f"{f:g}" for f in fr]], report.highest_table())
    (out / "highest_undetected.txt").write_text(format_highest_table(report) + "\n")
    battery = {f"{c.method}@{c.target!r}": c.audit for c in report.cells if c.audit is not None}
    (out / "battery.json").write_text(json.dumps(battery, indent=2) + "\n")
    summary = {
        "n": report.n, "original_di": _jsonable(report.original_di),
        "original_eoo": _jsonable(report.original_eoo), "threshold": report.threshold,
        "seed": report.config.seed, "grid": list(report.config.grid),
        "methods": list(report.config.methods),
        "searches": {m: s.to_dict() for m, s in report.searches.items()},
        "failures": [{"method": c.method, "target": c.target, "error": c.error}
                     for c in report.cells if c.status != "ok"],
        "covariates_standardised": True,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=_jsonable) + "\n")
    if model is not None:
        model.save(out / "model.npz")
    if report.config.svg:
        for metric in ("W(X,S,Yhat)", "KL(S,Yhat)"):
            series = {}
            for c in report.cells:
                if c.status == "ok" and c.method != "Matching_EoO":
                    series.setdefault(c.method, []).append((c.target, c.metrics[metric]))
            fname = "curve_" + metric.replace("(", "_").replace(")", "").replace(",", "") + ".svg"
            (out / fname).write_text(_svg_lines(series, f"{metric} vs target DI", metric))


def format_highest_table(report: ExperimentReport) -> str:
    from .audit import _table
    fr = report.config.audit.sample_fractions
    head = ["method", *[f"{f:.0%}" for f in fr]]
    rows = report.highest_table()
    return f"highest undetected DI (original DI {report.original_di:.3f})\n" + _table(head, rows)
