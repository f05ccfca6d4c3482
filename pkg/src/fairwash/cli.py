"""Command-line interface.

Exit status: 0 on success, 1 on usage errors, 2 on runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .audit import TEST_ORDER, AuditConfig, Auditor, format_highest, search_highest_undetected
from .data import Dataset, WeightedDistribution, disparate_impact, load_csv_with_weights, write_csv
from .discrete import MoveLog
from .experiment import (ConfigError, ExperimentConfig, config_from_mapping, format_highest_table,
                         prepare_reference, resolve_out_dir, run_experiment)
from .methods import METHODS, canonical, manipulate
from .model import Classifier, TrainConfig
from .synthetic import SyntheticSpec, gen_synthetic

logger = logging.getLogger("fairwash")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d,
                   help="seed for all randomness (default: the config's seed, else 0)")
    p.add_argument("--config", default=d, help="YAML config file (schema_version: 1)")
    p.add_argument("--out", default=d, help="output file or directory (default: $FAIRWASH_OUT or ./fairwash-out)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fairwash", description="Fair-washing by minimal data manipulation, and its detection.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_flags(p, suppress=False)
    shared = _Parser(add_help=False)
    _global_flags(shared, suppress=True)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", parents=[shared], help="draw a synthetic dataset")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--p-s", type=float, default=0.5)
    g.add_argument("--p0", type=float, default=0.12)
    g.add_argument("--p1", type=float, default=0.40)
    g.add_argument("--d", type=int, default=4)
    g.add_argument("--half-side", type=float, default=1.0)
    g.add_argument("--label-noise", type=float, default=0.0)

    t = sub.add_parser("train", parents=[shared], help="train the classifier and annotate the data")
    t.add_argument("--in", dest="input", required=True, help="CSV with a ground-truth column y")
    t.add_argument("--hidden", default="16", help="hidden layer sizes, comma separated ('' for logistic)")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=int, default=64)

    f = sub.add_parser("fairwash", parents=[shared], help="manipulate a dataset towards a target DI")
    f.add_argument("--method", required=True, help=f"one of {', '.join(METHODS)} (case-insensitive)")
    f.add_argument("--target-di", type=float, required=True,
                   help="target DI (an upper EoO bound for Matching_EoO)")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--model", help="model file from 'train' (required by Grad methods)")
    f.add_argument("--speed", type=int, default=1, help="individuals per step for Replace")

    a = sub.add_parser("audit", parents=[shared], help="test a submitted sample against the reference")
    a.add_argument("--sample", required=True, help="submitted sample CSV (a weight column makes it a distribution)")
    a.add_argument("--reference", required=True)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--B", type=int, default=200, help="reference draws per null distribution")
    a.add_argument("--fractions", type=_floats, default=(0.1, 0.2),
                   help="sample fractions when auditing a distribution")
    a.add_argument("--tries", type=int, default=30)
    a.add_argument("--text", action="store_true", help="print an aligned table instead of JSON")

    s = sub.add_parser("search", parents=[shared], help="highest undetected DI for one method")
    s.add_argument("--method", required=True)
    s.add_argument("--in", dest="input", help="annotated reference CSV (default: synthetic data)")
    s.add_argument("--model", help="model file (Grad methods)")
    s.add_argument("--fractions", type=_floats, default=(0.1, 0.2))
    s.add_argument("--grid", type=_floats, default=(0.35, 0.45, 0.55, 0.65, 0.75, 0.8))
    s.add_argument("--tries", type=int, default=100)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--B", type=int, default=200)

    r = sub.add_parser("report", parents=[shared], help="run the full experiment and write the report bundle")
    r.add_argument("--workers", type=int, help="worker threads for (method, target) cells")
    r.add_argument("--svg", action="store_true", help="also write SVG curves")
    return p


def _load(path) -> Dataset | WeightedDistribution:
    data, w = load_csv_with_weights(path)
    if w is None:
        return data
    return WeightedDistribution(data, w / w.sum())


def _read_config(args) -> dict | None:
    """Parsed config mapping (or None); resolves ``args.seed`` against it."""
    m = None
    if getattr(args, "config", None):
        with open(args.config) as fh:
            m = yaml.safe_load(fh) or {}
        if not isinstance(m, dict):
            raise ConfigError(f"{args.config}: expected a mapping at the top level")
    if args.seed is None:
        args.seed = int((m or {}).get("seed", 0))
    if m is not None:
        m["seed"] = args.seed
    return m


def _out_path(args, default_name: str) -> Path:
    """``--out`` naming a file is used as is; otherwise it is a directory."""
    out = resolve_out_dir(getattr(args, "out", None))
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / default_name


def _cmd_gen(args) -> int:
    conf = _read_config(args)
    if conf is not None:
        cfg = config_from_mapping(conf)
        spec = cfg.synthetic or SyntheticSpec(seed=args.seed)
    else:
        spec = SyntheticSpec(n=args.n, p_s=args.p_s, p0=args.p0, p1=args.p1, d=args.d,
                             half_side=args.half_side, label_noise=args.label_noise, seed=args.seed)
    data = gen_synthetic(spec, np.random.default_rng(args.seed))
    path = _out_path(args, "synthetic.csv")
    write_csv(path, data)
    print(json.dumps({"out": str(path), "n": data.n, "di": disparate_impact(data),
                      "expected_di": spec.expected_di}))
    return 0


def _cmd_train(args) -> int:
    _read_config(args)
    data = _load(args.input)
    if isinstance(data, WeightedDistribution):
        data = data.base
    hidden = tuple(int(h) for h in args.hidden.split(",") if h.strip())
    cfg = TrainConfig(hidden=hidden, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
    annotated, model = prepare_reference(data, cfg, np.random.default_rng(args.seed))
    path = _out_path(args, "annotated.csv")
    write_csv(path, annotated)
    named_file = bool(resolve_out_dir(getattr(args, "out", None)).suffix)
    model_path = path.with_name(path.stem + ".model.npz") if named_file else path.parent / "model.npz"
    model.save(model_path)
    print(json.dumps({"out": str(path), "model": str(model_path), "threshold": model.threshold,
                      "di": disparate_impact(annotated), **model.history}))
    return 0


def _method_model(method: str, model_path) -> Classifier | None:
    if model_path:
        return Classifier.load(model_path)
    if method.startswith("Grad"):
        raise UsageError(f"--model is required for {method}")
    return None


def _cmd_fairwash(args) -> int:
    _read_config(args)
    method = canonical(args.method)
    model = _method_model(method, args.model)
    data = _load(args.input)
    if isinstance(data, WeightedDistribution):
        data = data.base
    if model is not None:
        data = model.annotate(data)
    res = manipulate(method, data, args.target_di, model=model, speed=args.speed)
    path = _out_path(args, "manipulated.csv")
    write_csv(path, res.data)
    summary = {"method": res.method, "out": str(path), "original_di": res.original_di,
               "achieved_di": res.achieved_di, "target": res.target_di,
               "n_modified": int(len(res.modified_rows))}
    log = res.info.get("log")
    if log is None and res.modified_rows.size:
        # point moves without a discrete log: one entry per modified row
        log = MoveLog("DI")
        from .discrete import MoveEntry
        x0, x1 = data.X, res.data.X
        for k, i in enumerate(res.modified_rows):
            log.entries.append(MoveEntry(k + 1, (int(i),), res.method, float("nan"), float("nan"),
                                         displacement=float(np.sum((x1[i] - x0[i]) ** 2))))
    if log is not None:
        moves = path.with_name(path.stem + ".moves.csv")
        log.to_csv(moves)
        summary["moves"] = str(moves)
    print(json.dumps(summary, default=float))
    return 0


def _cmd_audit(args) -> int:
    _read_config(args)
    sample = _load(args.sample)
    ref = _load(args.reference)
    if isinstance(ref, WeightedDistribution):
        raise UsageError("the reference must be an unweighted dataset")
    cfg = AuditConfig(alpha=args.alpha, n_ref=args.B, sample_fractions=args.fractions,
                      max_tries=args.tries, seed=args.seed)
    aud = Auditor(ref, cfg)
    if isinstance(sample, WeightedDistribution):
        rep = aud.run_battery(sample, per_test=True)
        print(rep.to_text() if args.text else rep.to_json())
        return 0
    out = aud.evaluate(sample, replacement=False, needed=set(cfg.statistics))
    if args.text:
        for name in TEST_ORDER:
            if name not in out.tests:
                continue
            t = out.tests[name]
            print(f"{name:<14} {t.decision:<7} observed={t.observed:.6g} upper={t.upper:.6g}")
        print(f"{'battery':<14} {'accept' if out.accepted else 'reject'}")
    else:
        print(json.dumps(out.to_dict(), indent=2))
    return 0


def _cmd_search(args) -> int:
    method = canonical(args.method)
    conf = _read_config(args)
    if args.input:
        data = _load(args.input)
        if isinstance(data, WeightedDistribution):
            data = data.base
        model = _method_model(method, args.model)
        if model is not None:
            data = model.annotate(data)
    else:
        cfg = config_from_mapping(conf) if conf else ExperimentConfig(seed=args.seed)
        ss = np.random.SeedSequence(args.seed).spawn(2)
        raw = gen_synthetic(cfg.synthetic or SyntheticSpec(), np.random.default_rng(ss[0]))
        data, model = prepare_reference(raw, cfg.model, np.random.default_rng(ss[1]))
    acfg = AuditConfig(alpha=args.alpha, n_ref=args.B, sample_fractions=args.fractions, seed=args.seed)
    rep = search_highest_undetected(
        data, lambda t: manipulate(method, data, t, model=model), method, acfg, args.grid,
        max_tries=args.tries)
    lines = [f"highest undetected DI for {method} (original DI {disparate_impact(data):.3f})"]
    lines += [f"{f:.0%}: {format_highest(rep.highest[f])}" for f in args.fractions]
    print("\n".join(lines))
    if getattr(args, "out", None):
        path = _out_path(args, "search.json")
        path.write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    return 0


def _cmd_report(args) -> int:
    conf = _read_config(args)
    cfg = config_from_mapping(conf) if conf else ExperimentConfig(seed=args.seed, audit=AuditConfig(seed=args.seed))
    changes = {}
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if args.workers:
        changes["workers"] = args.workers
    if args.svg:
        changes["svg"] = True
    cfg = replace(cfg, **changes)
    rep = run_experiment(cfg)
    print(format_highest_table(rep))
    print(f"report written to {resolve_out_dir(cfg.out_dir)}")
    return 0


_COMMANDS = {"gen-synthetic": _cmd_gen, "train": _cmd_train, "fairwash": _cmd_fairwash,
             "audit": _cmd_audit, "search": _cmd_search, "report": _cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fairwash: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"fairwash {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
