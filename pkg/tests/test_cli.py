import csv

import numpy as np
import pytest

from exposure_lab.cli import main
from exposure_lab.config import ConfigError, RunConfig
from exposure_lab.diagnostics import measure_delta_t

SMALL = ["--set", "run.n_chains=2000", "--set", "schedule.T_prime=10", "-q"]


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _body(path):
    return "".join(line for line in open(path) if not line.startswith("#"))


def test_config_header_round_trip():
    cfg = RunConfig.default()
    cfg.set("sampler.kind=heun")
    cfg.set("run.seed=17")
    back = RunConfig.from_text(cfg.header() + "t,x\n1,2\n")
    assert back.header() == cfg.header()
    assert back.get("sampler", "kind") == "heun" and back.seed == 17


def test_config_grid_and_errors():
    cfg = RunConfig.default()
    assert cfg.grid("sweep", "b_grid") == pytest.approx(np.arange(1.0, 1.0501, 0.005).tolist())
    cfg.set("sweep.b_grid=1.0, 1.2")
    assert cfg.grid("sweep", "b_grid") == [1.0, 1.2]
    with pytest.raises(ConfigError, match="nosuch"):
        cfg.set("sampler.nosuch=1")
    with pytest.raises(ConfigError, match="line"):
        RunConfig.from_text("[schedule]\nT = 10\nbroken line\n")
    with pytest.raises(ConfigError, match=r"\[schedule\] T"):
        RunConfig.from_text("[schedule]\nT = ten\n").parent_schedule()
    with pytest.raises(ConfigError, match="unknown section"):
        RunConfig.from_text("[extra]\na = 1\n")


def test_verify_theory_passes_by_default(tmp_path, capsys):
    assert main(["verify-theory", "--out", str(tmp_path), "--threads", "4", "-q"]) == 0
    rows = _rows(tmp_path / "verify_theory.csv")
    assert list(rows[0]) == ["check", "t", "predicted", "measured", "se", "allowed", "pass"]
    assert {r["check"] for r in rows} == {"ddpm_single", "ddim_single", "ddpm_two_step"}
    assert all(r["pass"] == "pass" for r in rows)
    assert (tmp_path / "verify_ddpm_single.svg").exists()


def test_verify_theory_zero_error_passes(tmp_path):
    args = ["verify-theory", "--out", str(tmp_path), "-q", "--set", "verify.n=20000",
            "--set", "verify.error=0", "--set", "verify.two_step_error=0"]
    assert main(args) == 0


def test_verify_theory_zero_tolerance_fails(tmp_path):
    args = ["verify-theory", "--out", str(tmp_path), "-q", "--set", "verify.n=5000", "--set", "verify.tolerance=0"]
    assert main(args) == 1
    assert all(r["pass"] == "fail" for r in _rows(tmp_path / "verify_theory.csv"))


@pytest.mark.parametrize("args", [
    ["bias", "--set", "schedule.T_prime=x"],
    ["bias", "--set", "nope"],
    ["bias", "--set", "sampler.kind=rk4"],
    ["bias", "--threads", "0"],
    ["sweep", "--set", "sweep.b_grid="],
    ["bias", "--config", "/nonexistent/config.ini"],
])
def test_usage_errors_exit_2(tmp_path, args):
    assert main(args + ["--out", str(tmp_path), "-q"]) == 2


def test_run_failure_exits_1(tmp_path):
    assert main(["bias", "--out", str(tmp_path), "-q", "--set", "run.n_chains=10"]) == 1


@pytest.mark.parametrize("command", ["bias", "norms", "sample"])
def test_thread_count_does_not_change_output(tmp_path, command):
    for th in ("1", "3"):
        assert main([command, "--out", str(tmp_path / th), "--threads", th, *SMALL]) == 0
    for f in (tmp_path / "1").glob("*.csv"):
        assert (tmp_path / "3" / f.name).read_bytes() == f.read_bytes()


def test_rerun_reproduces_output(tmp_path):
    assert main(["bias", "--out", str(tmp_path / "a"), "--seed", "9", *SMALL]) == 0
    assert main(["rerun", str(tmp_path / "a" / "bias.csv"), "--out", str(tmp_path / "b"), "-q"]) == 0
    assert (tmp_path / "b" / "bias.csv").read_bytes() == (tmp_path / "a" / "bias.csv").read_bytes()
    assert main(["bias", "--config", str(tmp_path / "a" / "bias.csv"), "--out", str(tmp_path / "c"), "-q"]) == 0
    assert (tmp_path / "c" / "bias.csv").read_bytes() == (tmp_path / "a" / "bias.csv").read_bytes()


def test_bias_outputs(tmp_path):
    assert main(["bias", "--out", str(tmp_path), *SMALL]) == 0
    rows = _rows(tmp_path / "bias.csv")
    assert [int(r["t"]) for r in rows] == list(range(11))
    theory = _rows(tmp_path / "bias_theory.csv")
    assert len(theory) == 11
    assert (tmp_path / "bias_delta.svg").read_text().lstrip().startswith("<?xml")


def test_sweep_single_value_is_baseline(tmp_path):
    args = ["sweep", "--out", str(tmp_path), *SMALL, "--set", "sweep.b_grid=1.0", "--set", "sweep.n_generate=2000"]
    assert main(args) == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert len(rows) == 1 and rows[0]["argmin_delta"] == "1"
    cfg = RunConfig.from_file(tmp_path / "sweep.csv")
    base = measure_delta_t(cfg.denoiser(), cfg.data().sample, cfg.sampler(), 2000)
    assert float(rows[0]["delta_1"]) == base.delta[1]


def test_train_then_sample_with_weights(tmp_path):
    args = ["train", "--out", str(tmp_path), "-q", "--set", "train.steps=200", "--set", "train.hidden=16,16",
            "--set", "data.name=mixture2d", "--set", "data.dim=2"]
    assert main(args) == 0
    assert (tmp_path / "weights.csv").exists() and len(_rows(tmp_path / "loss.csv")) == 2
    args = ["sample", "--out", str(tmp_path), *SMALL, "--set", "denoiser.kind=mlp",
            "--set", f"denoiser.weights={tmp_path / 'weights.csv'}", "--set", "data.name=mixture2d"]
    assert main(args) == 0
    rows = _rows(tmp_path / "chains.csv")
    assert list(rows[0]) == ["chain_id", "t", "x0", "x1", "eps_norm"]
    assert main(["sample", "--out", str(tmp_path), *SMALL, "--set", "denoiser.kind=mlp"]) == 2


def test_norms_fit_file(tmp_path):
    assert main(["norms", "--out", str(tmp_path), *SMALL]) == 0
    fit = _rows(tmp_path / "lambda_fit.csv")[0]
    assert fit["form"] in ("uniform", "linear")
