import json
import math

import numpy as np
import pytest

from fairwash.cli import main
from fairwash.data import disparate_impact, load_csv, load_csv_with_weights
from fairwash.experiment import (ConfigError, ExperimentConfig, config_from_mapping, run_experiment)
from fairwash.audit import AuditConfig
from fairwash.model import TrainConfig
from fairwash.synthetic import SyntheticSpec, gen_synthetic


def test_synthetic_expected_di():
    spec = SyntheticSpec(p_s=0.5, p0=0.12, p1=0.40)
    assert spec.expected_di == pytest.approx(0.30)


def test_synthetic_parity_within_three_se():
    spec = SyntheticSpec(n=10_000, p0=0.3, p1=0.3)
    d = gen_synthetic(spec, np.random.default_rng(0))
    r0 = d.Yhat[d.S == 0].mean()
    r1 = d.Yhat[d.S == 1].mean()
    # delta method standard error of the ratio r0 / r1 at r0 = r1 = p
    n0, n1 = (d.S == 0).sum(), (d.S == 1).sum()
    se = math.sqrt(0.7 / 0.3 * (1 / n0 + 1 / n1))
    assert abs(r0 / r1 - 1.0) < 3 * se


def test_synthetic_determinism_and_geometry():
    spec = SyntheticSpec(n=500, d=3)
    a = gen_synthetic(spec, np.random.default_rng(4))
    b = gen_synthetic(spec, np.random.default_rng(4))
    np.testing.assert_array_equal(a.X, b.X)
    m = spec.bin_means()
    np.testing.assert_array_equal(m[1, 0], [1, -1, 1])
    np.testing.assert_array_equal(m[0, 1], [-1, 1, -1])
    np.testing.assert_array_equal(a.Y, a.Yhat)
    with pytest.raises(ValueError):
        SyntheticSpec(p0=1.0)


def test_label_noise():
    d = gen_synthetic(SyntheticSpec(n=4000, label_noise=0.2), np.random.default_rng(0))
    assert 0.15 < np.mean(d.Y != d.Yhat) < 0.25


def test_config_parsing():
    cfg = config_from_mapping({
        "schema_version": 1, "seed": 3,
        "data": {"synthetic": {"n": 300, "d": 2}},
        "model": {"hidden": [8], "epochs": 5},
        "audit": {"n_ref": 60, "fractions": [0.2], "search_tries": 7},
        "methods": ["Replace"], "grid": [0.5, 0.8],
        "output": {"dir": "x", "svg": True},
    })
    assert cfg.synthetic.n == 300 and cfg.model.hidden == (8,)
    assert cfg.audit.sample_fractions == (0.2,) and cfg.search_tries == 7
    assert cfg.audit.seed == 3 and cfg.svg
    with pytest.raises(ConfigError, match="schema_version"):
        config_from_mapping({"data": {}})
    with pytest.raises(ConfigError, match="unknown"):
        config_from_mapping({"schema_version": 1, "bogus": 1})
    with pytest.raises((ConfigError, ValueError)):
        config_from_mapping({"schema_version": 1, "methods": ["Nope"]})


def _tiny_cfg(tmp_path, **kw):
    base = dict(synthetic=SyntheticSpec(n=300, d=2), model=TrainConfig(hidden=(4,), epochs=10),
                audit=AuditConfig(n_ref=50, max_tries=4), search_tries=4, out_dir=str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


def test_noop_experiment(tmp_path):
    cfg = _tiny_cfg(tmp_path, methods=("Replace",), grid=(0.01,), search=False)
    rep = run_experiment(cfg)
    (cell,) = rep.cells
    assert cell.status == "ok" and cell.n_modified == 0
    for k, v in cell.metrics.items():
        assert v == pytest.approx(0.0, abs=1e-9), k
    assert not any(f["detected"] for f in cell.audit["fractions"])


def test_bundle_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        cfg = _tiny_cfg(d, methods=("Entropic_b", "Replace", "Matching_EoO"), grid=(0.6, 0.8),
                        workers=2, svg=True)
        run_experiment(cfg)
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]
    assert {"curves.csv", "radar.csv", "highest_undetected.csv", "summary.json", "battery.json"} <= set(outs[0])


def test_cells_never_silently_below_target(tmp_path):
    cfg = _tiny_cfg(tmp_path, methods=("Grad_b", "Replace"), grid=(0.6, 0.8), battery=False, search=False)
    rep = run_experiment(cfg, write=False)
    for c in rep.cells:
        assert c.status == "failed" or c.achieved_di >= c.target


# command line ---------------------------------------------------------------

def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["nonsense"]) == 1
    assert main(["fairwash", "--method", "replace"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_cli_runtime_error(tmp_path, capsys):
    assert main(["fairwash", "--method", "replace", "--target-di", "0.8",
                 "--in", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2


def test_cli_pipeline(tmp_path, capsys):
    syn = tmp_path / "syn.csv"
    assert main(["--seed", "2", "gen-synthetic", "--n", "300", "--d", "2", "--out", str(syn)]) == 0
    ann = tmp_path / "ann.csv"
    assert main(["train", "--in", str(syn), "--hidden", "4", "--epochs", "5", "--out", str(ann)]) == 0
    model = tmp_path / "ann.model.npz"
    assert model.exists()
    ref = load_csv(ann)
    capsys.readouterr()

    q = tmp_path / "q.csv"
    assert main(["fairwash", "--method", "matching", "--target-di", "0.8", "--in", str(ann),
                 "--out", str(q)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["achieved_di"] >= 0.8
    assert (tmp_path / "q.moves.csv").exists()
    assert disparate_impact(load_csv(q)) == pytest.approx(summary["achieved_di"])

    g = tmp_path / "g.csv"
    assert main(["fairwash", "--method", "grad_b", "--target-di", "0.8", "--in", str(ann),
                 "--model", str(model), "--out", str(g)]) == 0
    assert main(["fairwash", "--method", "grad_b", "--target-di", "0.8", "--in", str(ann),
                 "--out", str(g)]) == 1  # model missing

    e = tmp_path / "e.csv"
    assert main(["fairwash", "--method", "entropic_b", "--target-di", "0.8", "--in", str(ann),
                 "--out", str(e)]) == 0
    _, w = load_csv_with_weights(e)
    assert w is not None and w.sum() == pytest.approx(1.0)
    capsys.readouterr()

    s = tmp_path / "s.csv"
    from fairwash.data import write_csv
    write_csv(s, ref.take(np.arange(40)))
    assert main(["audit", "--sample", str(s), "--reference", str(ann), "--alpha", "0.05", "--B", "50"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["tests"]) == {"KL(X,S,Yhat)", "KL(S,Yhat)", "W(X,S,Yhat)", "W(S,Yhat)", "KS(Yhat)",
                                 "MMD(X,S,Yhat)", "MMD(S,Yhat)"}
    assert main(["audit", "--sample", str(e), "--reference", str(ann), "--B", "50", "--tries", "2",
                 "--text"]) == 0
    assert "KL(X,S,Yhat)" in capsys.readouterr().out
    assert main(["search", "--method", "replace", "--in", str(ann), "--B", "50", "--tries", "3",
                 "--grid", "0.6,0.8"]) == 0
    assert "highest undetected" in capsys.readouterr().out


def test_cli_seed_from_config(tmp_path, capsys):
    conf = tmp_path / "c.yaml"
    conf.write_text("schema_version: 1\nseed: 9\ndata:\n  synthetic:\n    n: 200\n    d: 2\n")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["gen-synthetic", "--config", str(conf), "--out", str(a)]) == 0
    assert main(["gen-synthetic", "--seed", "9", "--n", "200", "--d", "2", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
