import numpy as np
import pandas as pd
import pytest

from app.cli import commands
from app.cli.router import build_parser, dispatch
from app.config import Config
from app.models.params import PriorSpec
from app.utils.io import file_digest, read_json, write_json


@pytest.fixture
def simulated_dir(tmp_path, config_dir):
    out = tmp_path / "sim"
    config = str(config_dir / "simulation_gaussian_small.json")
    code = dispatch(["simulate", "--config", config, "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture
def gaussian_prior_file(tmp_path, gaussian_params, gaussian_config):
    prior = PriorSpec.from_params(
        gaussian_params,
        gamma_mean=np.array([init.gamma for init in gaussian_config.initial]),
        gamma_cov=np.stack([np.diag([0.05, 0.01, 0.005])] * 2),
        h1_mean=np.zeros(2),
        h1_var=np.full(2, 0.01),
    )
    return write_json(prior.model_dump(mode="json"), tmp_path / "prior.json")


def test_simulate_writes_a_manifest(simulated_dir, config_dir):
    manifest = read_json(simulated_dir / "manifest.json")
    config = str(config_dir / "simulation_gaussian_small.json")
    assert manifest["command"] == ["simulate", "--config", config]
    assert manifest["inputs"] == {config: file_digest(config)}
    assert manifest["seeds"] == {}
    assert "numpy" in manifest["versions"]
    assert (simulated_dir / "triangles" / "line_1.csv").exists()


def test_manifest_rerun_reproduces_the_csvs(tmp_path, simulated_dir):
    rerun = tmp_path / "rerun"
    manifest = str(simulated_dir / "manifest.json")
    assert dispatch(["reproduce", "--manifest", manifest, "--out", str(rerun)]) == 0
    for name in ("triangles/line_1.csv", "triangles/line_2.csv", "truth_factors.csv"):
        assert (simulated_dir / name).read_bytes() == (rerun / name).read_bytes()
    assert read_json(rerun / "manifest.json")["out_dir"] == str(rerun)


def test_seed_override_changes_the_panel(tmp_path, config_dir, simulated_dir):
    other = tmp_path / "other"
    config = str(config_dir / "simulation_gaussian_small.json")
    assert dispatch(["simulate", "--config", config, "--seed", "99", "--out", str(other)]) == 0
    assert read_json(other / "manifest.json")["seeds"] == {"seed": 99}
    first = (simulated_dir / "truth_factors.csv").read_bytes()
    assert (other / "truth_factors.csv").read_bytes() != first


def test_kalman_study_end_to_end(tmp_path, simulated_dir, gaussian_prior_file):
    fit_dir = tmp_path / "kf"
    panel = str(simulated_dir / "panel.json")
    prior = str(gaussian_prior_file)
    assert dispatch(["fit-kf", "--panel", panel, "--prior", prior, "--out", str(fit_dir)]) == 0
    assert read_json(fit_dir / "fit.json")["method"] == "kalman"

    forecast_dir = tmp_path / "forecast"
    code = dispatch(
        [
            "forecast",
            "--fit", str(fit_dir),
            "--draws", "300",
            "--levels", "0.75,0.95",
            "--workers", "1",
            "--out", str(forecast_dir),
        ]
    )
    assert code == 0
    summary = pd.read_csv(forecast_dir / "summary.csv")
    assert {"var_0.75", "var_0.95"} <= set(summary.columns)
    inputs = read_json(forecast_dir / "manifest.json")["inputs"]
    assert str(fit_dir / "fit.json") in inputs
    assert str(fit_dir / "manifest.json") not in inputs

    diagnose_dir = tmp_path / "diagnose"
    truth = str(simulated_dir / "truth.json")
    argv = ["diagnose", "--fit", str(fit_dir), "--truth", truth, "--out", str(diagnose_dir)]
    code = dispatch(argv)
    assert code == 0
    assert (diagnose_dir / "fitting_ratios.csv").exists()


def test_particle_fit_from_triangle_csvs(tmp_path, simulated_dir, gaussian_prior_file):
    out = tmp_path / "pf"
    code = dispatch(
        [
            "fit-pf",
            "--triangles",
            str(simulated_dir / "triangles" / "line_1.csv"),
            str(simulated_dir / "triangles" / "line_2.csv"),
            "--prior", str(gaussian_prior_file),
            "--particles", "50",
            "--seed", "4",
            "--workers", "1",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert read_json(out / "manifest.json")["seeds"] == {"seed": 4}
    assert len(pd.read_csv(out / "ess.csv")) == 6


def test_reproduce_defaults_to_the_bundled_statistics():
    parser = build_parser()
    args = parser.parse_args(["reproduce", "--study", "risk-margins", "--out", "unused"])
    assert args.statistics == str(commands.DEFAULT_STATISTICS)


def test_reproduce_risk_margins(tmp_path):
    assert dispatch(["reproduce", "--study", "risk-margins", "--out", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "risk_margins.csv")
    aggregate = table.dropna(subset=["diversification_benefit"])
    assert sorted(aggregate["diversification_benefit"].round(1)) == [23.4, 27.2]


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--config", "missing.json"],
        ["forecast", "--fit", "somewhere", "--levels", "1.5", "--out", "x"],
        ["fit-pf", "--prior", "p.json", "--particles", "0", "--out", "x"],
        ["unknown-command"],
    ],
)
def test_usage_errors_exit_with_two(argv):
    assert dispatch(argv) == 2


def test_invalid_config_file_exits_with_two(tmp_path):
    bad = write_json({"dim": 1, "seed": 1}, tmp_path / "bad.json")
    assert dispatch(["simulate", "--config", str(bad), "--out", str(tmp_path / "out")]) == 2


def test_failed_runs_exit_with_one(tmp_path, gaussian_prior_file):
    out = str(tmp_path / "out")
    assert dispatch(["simulate", "--config", str(tmp_path / "missing.json"), "--out", out]) == 1
    assert dispatch(["explore", "--out", out]) == 1
    assert dispatch(["fit-pf", "--prior", str(gaussian_prior_file), "--out", out]) == 1


def test_invalid_environment_exits_with_one(tmp_path, monkeypatch, config_dir):
    monkeypatch.setattr(Config, "DEFAULT_XI", 0.0)
    config = str(config_dir / "simulation_gaussian_small.json")
    assert dispatch(["simulate", "--config", config, "--out", str(tmp_path)]) == 1
    assert not (tmp_path / "manifest.json").exists()


def test_command_line_drops_the_output_directory():
    argv = ["forecast", "--fit", "f", "--out", "a", "--draws", "10", "--out=b"]
    assert commands.command_line(argv) == ["forecast", "--fit", "f", "--draws", "10"]
