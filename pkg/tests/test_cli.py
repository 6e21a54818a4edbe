import json

import numpy as np
import pytest

from sapgdeconv.cli import main


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({
        "image": {"builtin": "camera", "size": 32, "origin": [80, 180]},
        "sapg": {"n_iterations": 20, "warmup_steps": 10},
        "map": {"max_iters": 300},
    }))
    return str(path)


def test_degrade_writes_artifacts(tmp_path, config):
    out = tmp_path / "deg"
    assert main(["degrade", "--config", config, "--out-dir", str(out), "--family", "laplace"]) == 0
    meta = json.loads((out / "degrade.json").read_text())
    assert meta["family"] == "laplace" and meta["alpha"] == [0.3]
    assert abs(meta["metrics"]["bsnr_db"] - 30.0) < 1.0
    assert np.load(out / "degraded.npy").shape == (32, 32)
    assert (out / "kernel.txt").exists() and (out / "degraded.png").exists()


def test_calibrate_then_deconvolve(tmp_path, config, capsys):
    out = tmp_path / "cal"
    assert main(["calibrate", "--config", config, "--out-dir", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_used"] == 20
    assert set(summary["reference"]) >= {"alpha_rel_err", "sigma2_rel_err", "kernel_l1"}
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["theta_bar"] == summary["theta_bar"]
    code = main(["deconvolve", "--config", config, "--out-dir", str(out), "--summary", str(out / "summary.json")])
    report = json.loads((out / "deconvolve.json").read_text())
    assert code == (0 if report["converged"] else 3)
    assert report["psnr_identical"] is False


def test_deconvolve_needs_parameters(tmp_path, config):
    assert main(["deconvolve", "--config", config, "--out-dir", str(tmp_path)]) == 2


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--family", "moffat", "--size", "16"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True
    assert main(["gradcheck", "--family", "moffat", "--size", "16", "--corrupt", "0.01"]) == 3


def test_validate_schedule_output(capsys):
    assert main(["validate-schedule", "0.9", "0.3", "--regime", "fixed_batch"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["valid"] is True and rep["b_interval"] == pytest.approx([0.2, 0.4])


@pytest.mark.parametrize(
    "argv",
    [
        ["calibrate", "--config", "/nonexistent.json"],
        ["calibrate", "--alpha", "0.4"],
        ["sweep", "--parameter", "theta0", "--values", "{bad"],
    ],
)
def test_configuration_errors_exit_2(tmp_path, argv):
    assert main(argv + ["--out-dir", str(tmp_path)]) == 2


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 2}')
    assert main(["degrade", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert main(["degrade", "--config", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_unreadable_input_exits_2(tmp_path, config):
    junk = tmp_path / "junk.pgm"
    junk.write_bytes(b"P5\n8 8\n255\n")
    assert main(["calibrate", "--config", config, "--input", str(junk), "--out-dir", str(tmp_path)]) == 2


def test_unstable_step_exits_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "image": {"builtin": "camera", "size": 32, "origin": [80, 180]},
        "sapg": {"n_iterations": 5, "warmup_steps": 5, "gamma": 100.0},
    }))
    assert main(["calibrate", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_sweep_writes_long_table(tmp_path, config):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", config, "--out-dir", str(out), "--parameter", "theta0", "--values", "[0.01, 0.05]"])
    assert code == 0
    runs = json.loads((out / "sweep.json").read_text())["runs"]
    assert [r["value"] for r in runs] == [0.01, 0.05]
    assert (out / "sweep.csv").read_text().startswith("parameter,value,n,quantity,iterate")


def test_select_model_prints_choice(tmp_path, config, capsys):
    out = tmp_path / "sel"
    assert main(["select-model", "--config", config, "--out-dir", str(out), "--families", "gaussian,moffat"]) == 0
    rep = json.loads((out / "model_selection.json").read_text())
    assert capsys.readouterr().out.strip() == rep["selected"]
    assert len(rep["outcomes"]) == 2
