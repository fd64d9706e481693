import math

import numpy as np
import pytest

from mlrdsc import cli, experiments as ex
from mlrdsc.datasets import SyntheticSpec, save_cache, synth_union_of_subspaces
from mlrdsc.experiments import ExperimentConfig, TrialReport, TrialRow
from mlrdsc.trainer import load_state


def test_yaleb_lambda1_rule():
    assert ex.yaleb_lambda1(10) == pytest.approx(1.0)
    assert ex.yaleb_lambda1(20) == pytest.approx(10.0)
    assert ExperimentConfig.preset("yaleb", subject_count=38).lambda1 == pytest.approx(10 ** 2.8)
    assert ExperimentConfig.preset("yaleb", subject_count=20, lambda1=3.0).lambda1 == 3.0


@pytest.mark.parametrize("name,expected", [
    ("yaleb", dict(lambda2=40.0, lambda3=10.0, T=100, max_iter=900, layers=((10, 5), (20, 3), (30, 3)))),
    ("orl", dict(lambda1=5.0, lambda2=0.5, lambda3=1.0, T=10, max_iter=420, layers=((3, 3), (3, 3), (5, 3)))),
    ("coil20", dict(lambda1=20.0, lambda2=20.0, lambda3=5.0, T=5, max_iter=50, layers=((5, 3), (10, 3)))),
    ("coil100", dict(lambda1=20.0, lambda2=40.0, lambda3=10.0, T=50, max_iter=350, layers=((20, 3), (30, 3)))),
])
def test_presets(name, expected):
    cfg = ExperimentConfig.preset(name)
    for k, v in expected.items():
        assert getattr(cfg, k) == v, k
    tcfg = cfg.train_config()
    assert (tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps) == (1e-3, 0.9, 0.999, 1e-8)


@pytest.mark.parametrize("variant,conns,reg,distinct", [
    ("mlrdsc", 3, "membership", True), ("mlrdsc_l1", 3, "l1", True),
    ("dsc_l1", 1, "l1", False), ("dsc_l2", 1, "l2", False)])
def test_variants(variant, conns, reg, distinct):
    cfg = ExperimentConfig.preset("yaleb", variant=variant)
    assert cfg.arch().n_connections == conns
    assert cfg.arch().learn_distinctive is distinct
    assert cfg.train_config().regularizer == reg
    with pytest.raises(ValueError):
        ExperimentConfig.preset("yaleb", variant="sparse")


def test_sweep_trial_counts(monkeypatch):
    captured = []

    def fake_jobs(jobs, workers):
        captured.append(jobs)
        return [TrialRow(j[2], j[3], 1.0, 0.0, 0) for j in jobs]

    monkeypatch.setattr(ex, "_run_jobs", fake_jobs)
    assert len(ex.run_yaleb_sweep(38).rows) == 1
    report = ex.run_yaleb_sweep(10)
    assert len(report.rows) == 29
    assert captured[-1][0][0].subject_start == 1 and captured[-1][-1][0].subject_start == 29
    assert captured[-1][-1][3] == "subjects 29-38"
    assert all(j[0].lambda1 == pytest.approx(1.0) for j in captured[-1])
    assert len(ex.run_yaleb_sweep(20, starts=[3, 5]).rows) == 2
    for bad in (9, 39):
        with pytest.raises(ValueError):
            ex.run_yaleb_sweep(bad)
    with pytest.raises(ValueError):
        ex.run_yaleb_sweep(30, starts=[10])


def test_sensitivity_grid(monkeypatch):
    seen = []

    def fake_jobs(jobs, workers):
        seen.append(jobs[0][0])
        return [TrialRow(j[2], j[3], float(len(seen)), 0.0, 0) for j in jobs]

    monkeypatch.setattr(ex, "_run_jobs", fake_jobs)
    grid = ex.run_sensitivity(10, starts=[1, 2])
    assert len(grid) == 7
    assert [(c.lambda1, c.lambda2, c.lambda3) for c in seen[:3]] == [(1.0, 40.0, 10.0), (1.0, 4.0, 10.0),
                                                                      (1.0, 4000.0, 10.0)]
    table = ex.sensitivity_table(grid).splitlines()
    assert len(table) == 3
    assert table[1].startswith("mean") and table[2].startswith("median")
    assert len(table[1].split("|")) == 8
    assert "(10, 1, 1)" in table[0]
    assert len({c.config_hash() for c in seen}) == 7


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.preset("orl", seed=3, keep_top=5, stabilize=True)
    p = tmp_path / "c.txt"
    p.write_text(ex.dump_config(cfg))
    back = ex.load_config(p)
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_config_parsing():
    text = "dataset = orl  # faces\n\n layers = 4x3, 8x3\nstabilize = yes\nkeep_top = none\n"
    d = ex.parse_config_text(text)
    assert d == dict(dataset="orl", layers=((4, 3), (8, 3)), stabilize=True, keep_top=None)
    with pytest.raises(KeyError):
        ex.parse_config_text("gamma = 1")
    with pytest.raises(ValueError, match="line 1"):
        ex.parse_config_text("lambda1 1.0")
    with pytest.raises(ValueError):
        ex.parse_value("stabilize", "maybe")


def test_config_hash():
    a = ExperimentConfig.preset("coil20")
    assert len(a.config_hash()) == 12
    assert ExperimentConfig.preset("coil20", output_dir="elsewhere").config_hash() == a.config_hash()
    assert ExperimentConfig.preset("coil20", lambda2=1.0).config_hash() != a.config_hash()
    assert ExperimentConfig.preset("coil20", seed=1).config_hash() != a.config_hash()


def test_trial_seed():
    assert ex.trial_seed("abc", 0) == ex.trial_seed("abc", 0)
    assert ex.trial_seed("abc", 0) != ex.trial_seed("abc", 1)


def _report(errors, status=None):
    status = status or ["ok"] * len(errors)
    rows = [TrialRow(i, f"t{i}", e, 0.5, i, s) for i, (e, s) in enumerate(zip(errors, status))]
    return TrialReport("demo", "0123456789ab", rows)


def test_report_aggregates():
    r = _report([1.0, 2.0, 6.0])
    assert r.mean == pytest.approx(3.0) and r.median == 2.0 and r.runtime == 1.5
    failed = _report([1.0, math.nan, 3.0], ["ok", "aborted: x", "ok"])
    assert math.isnan(failed.mean) and math.isnan(failed.median)
    failed.exclude_failed = True
    assert failed.mean == 2.0


def test_emit_report_round_trip(tmp_path):
    reports = [_report([1.0, 2.5, 4.0]), TrialReport("other", "ba9876543210", [TrialRow(0, "x", 7.25, 1.0, 1)])]
    written = ex.emit_report(reports, tmp_path, plots=False)
    assert (tmp_path / "summary.txt") in written
    for r in reports:
        back = ex.read_report_csv(tmp_path / f"{r.name}_{r.config_hash}.csv")
        assert back.rows == r.rows
        assert back.mean == r.mean and back.median == r.median
    table = (tmp_path / "summary.txt").read_text().splitlines()
    assert len(table) == 3
    assert f"{reports[0].mean:.2f}" in table[1] and "7.25" in table[2]
    with pytest.raises(ValueError):
        ex.emit_report([], tmp_path)


@pytest.fixture()
def tiny_root(tmp_path, monkeypatch):
    """Data root whose ORL cache actually holds a small synthetic set, so the CLI runs in seconds."""
    root = tmp_path / "data"
    s = synth_union_of_subspaces(SyntheticSpec(3, 30, 3, 10, 0.0, 2), image_shape=(5, 6, 1))
    (root / "cache").mkdir(parents=True)
    save_cache(s, root / "cache" / "orl.mlrd")
    monkeypatch.chdir(tmp_path)
    return root


TINY = ["--set", "layers=3x3,4x3", "--set", "input_shape=5x6x1", "--set", "pretrain_epochs=50",
        "--set", "max_iter=30", "--set", "T=10"]


def test_run_trial_artifacts(tiny_root, tmp_path):
    cfg = ExperimentConfig.preset("orl", layers=((3, 3), (4, 3)), input_shape=(5, 6, 1), pretrain_epochs=20,
                                  max_iter=20, T=10, output_dir=str(tmp_path / "runs"))
    samples = ex.load_samples(cfg, tiny_root)
    row = ex.run_trial(cfg, samples, 0, "tiny")
    assert row.status == "ok" and 0.0 <= row.error <= 100.0
    d = tmp_path / "runs" / cfg.config_hash() / "trial_000"
    for name in ("config.txt", "loss.csv", "affinity.mlrd", "labels.txt", "state.mlrd"):
        assert (d / name).is_file(), name
    assert load_state(d / "state.mlrd").finished
    assert ex.load_config(d / "config.txt") == cfg
    assert len(np.loadtxt(d / "labels.txt")) == samples.n
    ex.emit_report([TrialReport("tiny", cfg.config_hash(), [row])], tmp_path / "rep")
    assert (d / "loss.png").is_file() and (d / "affinity.png").is_file()


def test_run_trial_aborts_cleanly(tiny_root, tmp_path):
    cfg = ExperimentConfig.preset("orl", layers=((3, 3),), input_shape=(5, 6, 1), pretrain_epochs=0,
                                  max_iter=5, T=5, lr=1e200, output_dir=str(tmp_path / "runs"))
    samples = ex.load_samples(cfg, tiny_root)
    row = ex.run_trial(cfg, samples, 0, "diverge")
    assert row.status.startswith("aborted") and math.isnan(row.error)


def test_cli_run_and_report(tiny_root, tmp_path, capsys):
    out = tmp_path / "runs"
    assert cli.main(["run", "--dataset", "orl", "--data-root", str(tiny_root), "--output-dir", str(out), *TINY]) == 0
    table = capsys.readouterr().out
    assert "orl_mlrdsc" in table
    csvs = list(out.rglob("orl_mlrdsc_*.csv"))
    assert len(csvs) == 1
    assert cli.main(["report", str(csvs[0]), "--out", str(tmp_path / "rep"), "--no-plots"]) == 0
    assert (tmp_path / "rep" / "summary.txt").read_text().splitlines()[1:] == table.splitlines()[1:]


def test_cli_dsc_variant(tiny_root, tmp_path, capsys):
    rc = cli.main(["run", "--dataset", "orl", "--variant", "dsc_l2", "--data-root", str(tiny_root),
                   "--output-dir", str(tmp_path / "runs"), *TINY])
    assert rc == 0 and "orl_dsc_l2" in capsys.readouterr().out


def test_cli_train_and_pretrain(tiny_root, tmp_path, capsys):
    args = ["--dataset", "orl", "--data-root", str(tiny_root), "--output-dir", str(tmp_path / "runs"), *TINY]
    assert cli.main(["pretrain", *args, "--out", str(tmp_path / "pre.mlrd")]) == 0
    assert (tmp_path / "pre.mlrd").is_file()
    assert cli.main(["train", *args]) == 0
    assert "clustering error" in capsys.readouterr().out
    (ckpt,) = (tmp_path / "runs").rglob("state.mlrd")
    assert cli.main(["train", "--resume", str(ckpt)]) == 0
    assert "epoch 30 finished=True" in capsys.readouterr().out


def test_cli_config_file(tiny_root, tmp_path, capsys):
    cfg_file = tmp_path / "exp.txt"
    cfg_file.write_text("dataset = orl\nlayers = 3x3\ninput_shape = 5x6x1\npretrain_epochs = 5\n"
                        "max_iter = 10\nT = 5\n")
    rc = cli.main(["train", "--config", str(cfg_file), "--data-root", str(tiny_root),
                   "--output-dir", str(tmp_path / "runs")])
    assert rc == 0 and "clustering error" in capsys.readouterr().out


def test_cli_baseline_synthetic(capsys):
    assert cli.main(["baseline-classic"]) == 0
    assert "0.00%" in capsys.readouterr().out


def test_cli_missing_data_root(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(ex.DATA_ROOT_ENV, raising=False)
    assert cli.main(["run", "--dataset", "orl"]) == 2
    assert ex.DATA_ROOT_ENV in capsys.readouterr().err
    assert cli.main(["prepare-data", "--dataset", "orl", "--data-root", str(tmp_path / "none")]) == 2


def test_cli_prepare_data(orl_root, tmp_path):
    root = tmp_path / "data"
    import shutil
    shutil.copytree(orl_root, root / "orl")
    assert cli.main(["prepare-data", "--dataset", "orl", "--data-root", str(root)]) == 0
    assert (root / "cache" / "orl.mlrd").is_file()
    cfg = ExperimentConfig.preset("orl")
    assert ex.load_samples(cfg, root) == ex.load_samples(cfg, root, use_cache=False)
