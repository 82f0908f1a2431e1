import csv
import json
import subprocess
import sys

import pytest

from diml.cli import main
from diml.config import preset
from diml.estimators import CSV_COLUMNS


def tiny(name="e1", **data):
    cfg = preset(name)
    cfg.data.train_trajectories = data.get("M", 6)
    cfg.data.horizon = data.get("T", 30)
    for est in (cfg.estimators.diml, cfg.estimators.tabular, cfg.estimators.struct, cfg.estimators.diml_wrong):
        if est is not None:
            est.epochs = 2
            est.widths = [8]
    cfg.metrics.cfkl_rollouts, cfg.metrics.cfkl_horizon, cfg.metrics.diff_contexts = 3, 20, 32
    cfg.metrics.eval_every = 1
    return cfg


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.yaml"
    cfg_path.write_text(tiny().to_yaml())
    assert main(["simulate", "--config", str(cfg_path), "--out", str(root / "nested" / "data")]) == 0
    return root, cfg_path, root / "nested" / "data"


def test_simulate_writes_manifest_and_files(dataset):
    root, cfg_path, data = dataset
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["shape"] == {"n": 3, "k": 4}
    assert manifest["config"]["game"] == {"n": 3, "k": 4}
    assert set(manifest["seeds"]) >= {"master", "stream", "mechanism", "data", "contexts", "cfkl", "init", "shuffle"}
    assert "tool_version" in manifest
    assert len(manifest["files"]["train"]) == 6 and len(manifest["files"]["heldout"]) == 2
    assert (data / "truth.json").is_file()


def test_simulate_rerun_is_bit_identical(dataset, tmp_path):
    root, cfg_path, data = dataset
    assert main(["simulate", "--config", str(cfg_path), "--out", str(tmp_path / "again")]) == 0
    for f in data.rglob("*"):
        if f.is_file():
            assert (tmp_path / "again" / f.relative_to(data)).read_bytes() == f.read_bytes()


def test_fit_diml_wrong_echoes_scaled_beta(dataset, tmp_path):
    root, cfg_path, data = dataset
    out = tmp_path / "wrong"
    assert main(["fit", "--data", str(data), "--estimator", "diml-wrong", "--config", str(cfg_path),
                 "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["beta_factor"] == 2.0
    assert manifest["likelihood_learner"]["beta"] == 2 * manifest["config"]["generator"]["beta"]
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert ",".join(rows[0]) == "epoch,train_nll,heldout_nll,diff_mse,cfkl_params,wallclock_s"
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    assert all(r[-1] == "" for r in rows[1:])


def test_fit_record_wallclock_fills_column(dataset, tmp_path):
    root, cfg_path, data = dataset
    out = tmp_path / "timed"
    assert main(["fit", "--data", str(data), "--estimator", "tabular", "--out", str(out), "--record-wallclock"]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()[1:]
    assert all(float(r.split(",")[-1]) >= 0 for r in rows)
    assert (out / "timing.csv").read_text().startswith("epoch,epoch_seconds,train_loss")


def test_evaluate_writes_single_row(dataset, tmp_path, capsys):
    root, cfg_path, data = dataset
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--data", str(data), "--estimator", "diml", "--out", str(fit_dir)]) == 0
    out = tmp_path / "eval" / "row.csv"
    assert main(["evaluate", "--truth", str(data / "truth.json"), "--est", str(fit_dir / "mechanism.json"),
                 "--data", str(data), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "diff_mse,cfkl_exact_joint,cfkl_count_key,heldout_nll"
    assert len(lines) == 2 and all(v for v in lines[1].split(","))
    assert "diff_mse" in capsys.readouterr().out
    # the truth scores zero against itself
    assert main(["evaluate", "--truth", str(data / "truth.json"), "--est", str(data / "truth.json"),
                 "--data", str(data), "--out", str(out)]) == 0
    vals = out.read_text().splitlines()[1].split(",")
    assert float(vals[0]) == 0.0 and float(vals[1]) == 0.0 and float(vals[2]) == 0.0


def test_tabular_on_e4_is_refused(tmp_path, capsys):
    cfg = tiny("e4", M=2, T=3)
    path = tmp_path / "e4.yaml"
    path.write_text(cfg.to_yaml())
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "d")]) == 0
    code = main(["fit", "--data", str(tmp_path / "d"), "--estimator", "tabular", "--config", str(path),
                 "--out", str(tmp_path / "f")])
    assert code == 3
    assert "refused" in capsys.readouterr().err


def test_malformed_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("game:\n  n: 3\n  kk: 4\n")
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert f"{path}:3:" in err and "game.kk" in err


def test_shape_mismatch_is_config_error(dataset, tmp_path):
    root, cfg_path, data = dataset
    assert main(["fit", "--data", str(data), "--estimator", "diml", "--config", "e2", "--out",
                 str(tmp_path / "x")]) == 2


def test_numeric_failure_exit_code(dataset, tmp_path, capsys):
    root, cfg_path, data = dataset
    cfg = tiny()
    cfg.generator.epsilon, cfg.generator.beta = 0.0, 1e5
    path = tmp_path / "greedy.yaml"
    path.write_text(cfg.to_yaml())
    code = main(["fit", "--data", str(data), "--estimator", "diml", "--config", str(path), "--out", str(tmp_path / "g")])
    assert code == 4
    assert "epsilon" in capsys.readouterr().err


def test_preset_dump_round_trips(tmp_path):
    out = tmp_path / "e3.yaml"
    assert main(["preset-dump", "e3", "--out", str(out)]) == 0
    assert out.read_text() == preset("e3").to_yaml()


def test_grad_check_and_theory_check_commands(capsys):
    assert main(["grad-check", "--points", "2"]) == 0
    assert main(["theory-check", "--skip-consistency"]) == 0
    out = capsys.readouterr().out
    assert "[PASS] grad-check neural" in out and "[PASS] identifiability sampled" in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "diml", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "diml" in res.stdout


def test_experiment_pipeline_workers_do_not_change_outputs(tmp_path):
    from diml.experiment import run_experiment

    cfg = tiny("e2")
    a = run_experiment(cfg, tmp_path / "a", workers=1)
    b = run_experiment(cfg, tmp_path / "b", workers=2)
    assert list(a.results) == ["diml", "tabular", "struct", "diml-wrong"]
    for name in a.results:
        assert (tmp_path / "a" / name / "metrics.csv").read_bytes() == (tmp_path / "b" / name / "metrics.csv").read_bytes()
    summary = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert summary[0] == "estimator,epochs,train_nll,heldout_nll,diff_mse,cfkl_params" and len(summary) == 5


def test_experiment_omits_tabular_on_large_games(tmp_path):
    from diml.experiment import applicable

    cfg = tiny("e4")
    cfg.estimators.tabular = cfg.estimators.diml
    run, skipped = applicable(cfg)
    assert "tabular" not in run and "tabular" in skipped
