import csv
import json
import math

import pytest

from replicamap import cli
from replicamap import experiments as ex


def write_config(tmp_path, experiments, name="cfg.json", **top):
    doc = {"schema_version": "1", "experiments": experiments, **top}
    p = tmp_path / name
    p.write_text(json.dumps(doc, indent=2))
    return p


def base_exp(**kw):
    d = {
        "name": "e",
        "prior": {"name": "bernoulli_gaussian", "rho": 0.1},
        "scale": {"name": "constant", "s": 1},
        "estimator": {"family": "lasso"},
        "snr0_db": 10,
        "sweep": {"parameter": "beta", "values": [0.5, 1.0]},
    }
    d.update(kw)
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_presets_list(capsys):
    assert cli.main(["presets", "list"]) == 0
    names = [line.split("\t")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["fig2", "fig3", "fig4", "fig5", "smoke"]
    for n in names:
        ex.load_preset(n)


def test_presets_show(capsys):
    assert cli.main(["presets", "show", "smoke"]) == 0
    assert json.loads(capsys.readouterr().out)["schema_version"] == "1"


def test_predict_beta_zero_row(tmp_path):
    exp = base_exp(estimator={"family": "linear"}, sigma0_sq=0.1, snr0_db=None)
    exp.pop("snr0_db")
    exp["sweep"] = {"parameter": "beta", "values": [0]}
    cfg = write_config(tmp_path, [exp])
    assert cli.main(["predict", str(cfg), "--out-dir", str(tmp_path)]) == 0
    (row,) = read_rows(tmp_path / "e_predict.csv")
    assert float(row["sigma_eff_sq"]) == 0.1
    assert float(row["eta"]) == 1.0
    assert row["status"] == "ok"


def test_predict_csv_round_trip(tmp_path):
    cfg = write_config(tmp_path, [base_exp(support=True)])
    assert cli.main(["predict", str(cfg), "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "e_predict.csv")
    (exp,) = ex.parse_experiment_file(cfg.read_text())
    for r, v in zip(rows, exp.sweep_values):
        direct, _ = ex.predict_point(exp, v)
        assert float(r["beta"]) == v
        for k, val in direct.items():
            if isinstance(val, float):
                assert float(r[k]) == val or (math.isnan(val) and math.isnan(float(r[k])))
            else:
                assert r[k] == str(val)


def test_predict_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, [base_exp(estimator={"family": "zero_norm"})])
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["predict", str(cfg), "--out-dir", str(a)]) == 0
    assert cli.main(["predict", str(cfg), "--out-dir", str(b), "--workers", "2"]) == 0
    assert (a / "e_predict.csv").read_bytes() == (b / "e_predict.csv").read_bytes()


def test_smoke_simulate_rows(tmp_path):
    assert cli.main(["simulate", "smoke", "--out-dir", str(tmp_path)]) == 0
    trials = read_rows(tmp_path / "smoke_trials.csv")
    assert len(trials) == 8
    for beta in ("0.5", "1"):
        assert sum(t["beta"] == beta for t in trials) == 4
    sim = read_rows(tmp_path / "smoke_simulate.csv")
    assert [r["beta"] for r in sim] == ["0.5", "1"]
    assert len(read_rows(tmp_path / "smoke_cdf.csv")) == 400


def test_simulate_workers_and_seed(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert cli.main(["simulate", "smoke", "--out-dir", str(a)]) == 0
    assert cli.main(["simulate", "smoke", "--out-dir", str(b), "--workers", "3"]) == 0
    assert cli.main(["simulate", "smoke", "--out-dir", str(c), "--seed", "123"]) == 0
    for f in ("smoke_simulate.csv", "smoke_trials.csv", "smoke_cdf.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    assert (a / "smoke_trials.csv").read_bytes() != (c / "smoke_trials.csv").read_bytes()


def test_compare_identical_and_shuffled(tmp_path, capsys):
    cfg = write_config(tmp_path, [base_exp(sweep={"parameter": "beta", "values": [0.5, 1.0, 2.0]})])
    assert cli.main(["predict", str(cfg), "--out-dir", str(tmp_path)]) == 0
    capsys.readouterr()
    p = tmp_path / "e_predict.csv"
    assert cli.main(["compare", str(p), str(p), "--out-dir", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["max_gap_db"] == 0 and summary["points"] == 3 and summary["failures"] == []
    lines = p.read_text().splitlines()
    shuffled = tmp_path / "shuffled.csv"
    shuffled.write_text("\n".join([lines[0], lines[3], lines[1], lines[2]]) + "\n")
    assert cli.main(["compare", str(p), str(shuffled), "--out-dir", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["max_gap_db"] == 0


def test_compare_failure_and_mismatch(tmp_path, capsys):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    c = tmp_path / "c.csv"
    a.write_text("beta,median_se_db\n1,-10\n2,-8\n")
    b.write_text("beta,se_db\n2,-7\n1,-10.2\n")
    c.write_text("beta,se_db\n1,-10\n3,-8\n")
    assert cli.main(["compare", str(a), str(b), "--out-dir", str(tmp_path), "--tolerance-db", "0.5"]) == 3
    s = json.loads(capsys.readouterr().out)
    assert s["failures"] == [2.0] and s["max_gap_db"] == pytest.approx(1.0)
    assert cli.main(["compare", str(a), str(c), "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "unmatched points: 2, 3" in err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": "1",\n "experiments": [\n  {"name": }]}')
    assert cli.main(["predict", str(bad)]) == 1
    assert "bad.json:3:" in capsys.readouterr().err

    cases = [
        (base_exp(sweep={"parameter": "beta", "values": [1.0, 0.5]}), "strictly increasing"),
        (base_exp(prior={"name": "bernoulli_gaussian"}), "experiments[0].prior.rho: missing"),
        (base_exp(prior={"name": "bernoulli_gaussian", "rho": 2}), "experiments[0].prior"),
        (base_exp(outputs=[{"metric": "plot", "path": "x"}]), "unknown metric 'plot'"),
        (base_exp(outputs=[{"metric": "simulate", "path": "x"}]), "needs a montecarlo section"),
        (base_exp(estimator={"family": "ridge"}), "unknown estimator"),
        (base_exp(estimator={"family": "zero_norm"}, montecarlo={"n": 10, "n_trials": 2}), "only linear and lasso"),
        (base_exp(sigma0_sq=0.1), "exactly one of sigma0_sq and snr0_db"),
        (base_exp(typo=1), "unknown field(s) typo"),
    ]
    for exp, msg in cases:
        cfg = write_config(tmp_path, [exp])
        assert cli.main(["predict", str(cfg)]) == 1
        assert msg in capsys.readouterr().err

    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"schema_version": "9", "experiments": [base_exp()]}))
    assert cli.main(["predict", str(cfg)]) == 1
    assert "unsupported version" in capsys.readouterr().err
    assert cli.main(["predict", "no_such_thing"]) == 1


def test_solver_failure_exit_code(tmp_path):
    exp = base_exp(sweep={"parameter": "beta", "values": [1.0, 1e40]})
    cfg = write_config(tmp_path, [exp])
    assert cli.main(["predict", str(cfg), "--out-dir", str(tmp_path)]) == 2
    rows = read_rows(tmp_path / "e_predict.csv")
    assert [r["status"] for r in rows] == ["ok", "infeasible"]


def test_sweeps_over_gamma_and_snr(tmp_path):
    exps = [
        base_exp(name="g", beta=1.0, sweep={"parameter": "gamma", "values": [0.05, 0.1, 0.2]}),
        base_exp(name="s", beta=1.0, snr0_db=None, sweep={"parameter": "snr0_db", "values": [5, 10, 15]}),
    ]
    exps[1].pop("snr0_db")
    cfg = write_config(tmp_path, exps)
    assert cli.main(["predict", str(cfg), "--out-dir", str(tmp_path)]) == 0
    g = read_rows(tmp_path / "g_predict.csv")
    assert [float(r["gamma"]) for r in g] == [0.05, 0.1, 0.2]
    s = read_rows(tmp_path / "s_predict.csv")
    se = [float(r["se_db"]) for r in s]
    assert se[0] > se[1] > se[2]


def test_unknown_scale_prediction_uses_folded_prior(tmp_path):
    tp = {"name": "three_point", "rho": 0.1}
    ud = {"name": "uniform_db", "range_db": 10, "n_atoms": 8}
    exps = [
        base_exp(name="unk", prior=tp, scale=ud, scale_known=False),
        base_exp(name="kn", prior=tp, scale=ud),
    ]
    cfg = write_config(tmp_path, exps)
    assert cli.main(["predict", str(cfg), "--out-dir", str(tmp_path)]) == 0
    unk = read_rows(tmp_path / "unk_predict.csv")
    kn = read_rows(tmp_path / "kn_predict.csv")
    for r in unk:
        assert r["se_db"] == r["signal_se_db"]
    assert all(u != k for u, k in zip(unk, kn))


def test_format_value_round_trips():
    for v in (0.1, 1 / 3, 1e-300, -2.5e17, math.pi, 5e-324):
        assert float(cli.format_value(v)) == v
    assert cli.format_value(3) == "3"
    assert cli.format_value(float("nan")) == "nan"


def test_write_atomic_replaces(tmp_path):
    p = tmp_path / "sub" / "f.csv"
    cli.write_atomic(p, "a\n")
    cli.write_atomic(p, "b\n")
    assert p.read_text() == "b\n"
    assert [q.name for q in p.parent.iterdir()] == ["f.csv"]
