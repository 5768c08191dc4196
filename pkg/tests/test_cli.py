import csv
import json

import numpy as np
import pytest

from cnreg.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main, parse_args
from cnreg.data import read_dataset_csv
from cnreg.model import checkpoint_load

FAST = ["--pretrain-iters", "60", "--joint-iters", "40"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def synth(tmp_path, family="sine1d", name="d.csv", *extra):
    path = str(tmp_path / name)
    assert main(["synth", "--family", family, "--out", path, *extra]) == 0
    return path


def test_synth_sine_default(tmp_path):
    path = synth(tmp_path)
    X, y = read_dataset_csv(path)
    assert X.shape == (100, 1) and y.shape == (100,)
    with open(path) as fh:
        assert fh.readline().strip() == "x_1,y"
    manifest = json.loads(open(path + ".manifest.json").read())
    assert manifest["family"] == "sine1d" and manifest["seed"] == 0


def test_synth_hetero_default(tmp_path):
    X, y = read_dataset_csv(synth(tmp_path, "hetero_gaussian"))
    assert X.shape == (1000, 2)


def test_synth_bivariate_header(tmp_path):
    path = synth(tmp_path, "bivariate_gaussian", "b.csv", "--n", "50")
    with open(path) as fh:
        assert fh.readline().strip() == "x_1,x_2,x_3,x_4,y_1,y_2"
    X, Y = read_dataset_csv(path)
    assert Y.shape == (50, 2)


def test_synth_param_override(tmp_path):
    path = synth(tmp_path, "hetero_gaussian", "h.csv", "--n", "2000", "--param", "mu_var=0.25")
    X, _ = read_dataset_csv(path)
    assert X[:, 0].std() == pytest.approx(0.5, rel=0.1)


def test_synth_seed_changes_data(tmp_path):
    a = synth(tmp_path, "weibull", "a.csv", "--n", "30")
    b = str(tmp_path / "b.csv")
    assert main(["--seed", "3", "synth", "--family", "weibull", "--n", "30", "--out", b]) == 0
    c = str(tmp_path / "c.csv")
    assert main(["synth", "--seed", "3", "--family", "weibull", "--n", "30", "--out", c]) == 0
    assert open(a).read() != open(b).read()
    assert open(b).read() == open(c).read()


def test_train_trace_and_determinism(tmp_path):
    data = synth(tmp_path)
    ck1, ck2 = str(tmp_path / "m1.npz"), str(tmp_path / "m2.npz")
    assert main(["train", "--data", data, "--out", ck1, *FAST]) == 0
    assert main(["train", "--data", data, "--out", ck2, *FAST]) == 0
    rows = read_csv(ck1 + ".trace.csv")
    assert len(rows) == 100
    assert [r["phase"] for r in rows[:60]] == ["pretrain"] * 60
    assert rows[60]["phase"] == "joint"
    a, b = checkpoint_load(ck1), checkpoint_load(ck2)
    assert a.g_net.fingerprint() == b.g_net.fingerprint()
    assert a.f_net.fingerprint() == b.f_net.fingerprint()


def test_train_pretrain_only_smoke(tmp_path):
    data = synth(tmp_path)
    ck = str(tmp_path / "m.npz")
    assert main(["train", "--data", data, "--out", ck, "--pretrain-iters", "100", "--joint-iters", "0"]) == 0
    assert len(read_csv(ck + ".trace.csv")) == 100


def test_eval_outputs(tmp_path):
    data = synth(tmp_path)
    ck = str(tmp_path / "m.npz")
    out = str(tmp_path / "ev")
    assert main(["train", "--data", data, "--out", ck, *FAST]) == 0
    assert main(["eval", "--data", data, "--checkpoint", ck, "--out-dir", out]) == 0
    metrics = json.loads(open(f"{out}/metrics.json").read())
    assert set(metrics) == {"cal_hat", "coverage90", "gof_hat", "mae"}
    cal = read_csv(f"{out}/calibration.csv")
    assert len(cal) == 8
    sharp = read_csv(f"{out}/sharpness.csv")
    assert list(sharp[0]) == ["nominal", "empirical_coverage", "median_width"]
    assert main(["eval", "--data", data, "--checkpoint", ck, "--out-dir", out, "--source", "from_f"]) == 0


def test_eval_oracle_hetero(tmp_path):
    data = synth(tmp_path, "hetero_gaussian")
    out = str(tmp_path / "th")
    assert main(["eval", "--data", data, "--oracle", "hetero_gaussian", "--out-dir", out]) == 0
    metrics = json.loads(open(f"{out}/metrics.json").read())
    assert metrics["gof_hat"] == pytest.approx(-1.668, abs=0.15)
    assert metrics["mae"] == 0.0


def test_pipeline_deterministic(tmp_path):
    reports = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        d.mkdir()
        data = str(d / "d.csv")
        assert main(["--seed", "5", "synth", "--family", "sine1d", "--out", data]) == 0
        assert main(["--seed", "5", "train", "--data", data, "--out", str(d / "m.npz"), *FAST]) == 0
        assert main(["--seed", "5", "eval", "--data", data, "--checkpoint", str(d / "m.npz"),
                     "--out-dir", str(d / "ev")]) == 0
        reports.append(open(d / "ev" / "metrics.json").read())
    assert reports[0] == reports[1]


def test_config_file(tmp_path):
    data = synth(tmp_path)
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("pretrain_iters: 30\njoint_iters: 10\nseed: 2\n")
    ck = str(tmp_path / "m.npz")
    assert main(["train", "--config", str(cfg), "--data", data, "--out", ck]) == 0
    assert len(read_csv(ck + ".trace.csv")) == 40
    assert checkpoint_load(ck).config.seed == 2


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("bogus: 1\n")
    assert main(["synth", "--config", str(cfg), "--family", "sine1d", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_output_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv("CNREG_OUTPUT_DIR", str(tmp_path))
    assert main(["synth", "--family", "sine1d", "--out", "rel.csv"]) == 0
    assert (tmp_path / "rel.csv").exists()


def test_exit_codes(tmp_path):
    data = synth(tmp_path)
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out", "x"]) == EXIT_DATA
    assert main(["train", "--data", data, "--out", str(tmp_path / "m"), "--batch-size", "0"]) == EXIT_CONFIG
    assert main(["synth", "--family", "sine1d", "--out", str(tmp_path / "s"), "--split-ratio", "1.5"]) == EXIT_CONFIG
    bad = tmp_path / "bad.csv"
    bad.write_text("x_1,y\n1.0,abc\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "m")]) == EXIT_DATA
    hetero = synth(tmp_path, "hetero_gaussian", "h.csv", "--n", "50")
    ck = str(tmp_path / "m.npz")
    assert main(["train", "--data", data, "--out", ck, *FAST]) == 0
    assert main(["eval", "--data", hetero, "--checkpoint", ck, "--out-dir", str(tmp_path / "e")]) == EXIT_DATA


def test_numeric_abort_exit_code(tmp_path, monkeypatch):
    import cnreg.model as model_mod

    real = model_mod.g_loss

    def poisoned(*a, **kw):
        _, grads = real(*a, **kw)
        return float("nan"), grads

    monkeypatch.setattr(model_mod, "g_loss", poisoned)
    data = synth(tmp_path)
    code = main(["train", "--data", data, "--out", str(tmp_path / "m.npz"), *FAST])
    assert code == EXIT_NUMERIC


def test_distinct_exit_codes():
    assert len({EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, 0}) == 4


def test_compare_single_replication(tmp_path):
    out = str(tmp_path / "cmp.csv")
    assert main(["compare", "--families", "hetero_gaussian", "--replications", "1", "--n", "120",
                 "--out", out, *FAST]) == 0
    rows = read_csv(out)
    assert [r["method"] for r in rows] == ["TH", "CN-g", "CN-f", "g-only"]
    assert all(float(r["cal_hat_sd"]) == 0.0 for r in rows)
    raw = read_csv(str(tmp_path / "cmp.replications.csv"))
    assert len(raw) == 4


def test_convergence_table(tmp_path):
    out = str(tmp_path / "conv.csv")
    assert main(["convergence", "--n-grid", "40,60", "--n-test", "100", "--out", out,
                 "--pretrain-iters", "20", "--joint-iters", "10"]) == 0
    rows = read_csv(out)
    assert len(rows) == 2 * 3
    assert {r["variant"] for r in rows} == {"t_g", "cn_full", "g_only_uniform_f"}


def test_chain_commands(tmp_path):
    data = synth(tmp_path, "bivariate_gaussian", "b.csv", "--n", "200")
    chain_dir = str(tmp_path / "chain")
    assert main(["chain-train", "--data", data, "--out", chain_dir, "--cdf-samples", "200", *FAST]) == 0
    out = str(tmp_path / "ce")
    assert main(["chain-eval", "--chain", chain_dir, "--data", data, "--out-dir", out,
                 "--n-x", "2", "--draws", "100"]) == 0
    summary = json.loads(open(f"{out}/summary.json").read())
    assert len(summary) == 2 and "max_abs_error" in summary[0] and "correlation" in summary[0]
    grid = read_csv(f"{out}/joint_cdf_0.csv")
    assert len(grid) == 121 and list(grid[0]) == ["z_1", "z_2", "probability"]
    assert main(["chain-train", "--data", synth(tmp_path), "--out", chain_dir]) == EXIT_DATA


def test_boolean_training_flags():
    args = parse_args(["train", "--data", "d", "--out", "o", "--no-moment-matching", "--pretrain-margin", "0.5"])
    assert args.moment_matching is False and args.pretrain_margin == 0.5
    args = parse_args(["train", "--data", "d", "--out", "o"])
    assert args.moment_matching is None
