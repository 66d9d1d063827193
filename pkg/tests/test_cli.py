"""
Tests for the command-line interface.
"""
import json
import os

import pytest
from click.testing import CliRunner

from cli.commands import cli
from cli.error_handlers import ExitCodes
from services.dataset_io import read_provenance, read_table

SMALL_CONFIG = {
    "seed": 9,
    "sim": {"trials": 1, "poses": 8},
    "noise": {"fit_samples": 400, "gmm_components": 2},
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return str(path)


@pytest.fixture
def dataset_dir(runner, config_path, tmp_path):
    output = str(tmp_path / "dataset")
    result = runner.invoke(cli, ["simulate", "--config", config_path, "--output", output])
    assert result.exit_code == ExitCodes.SUCCESS, result.output
    return output


def error_payload(result):
    line = next(line for line in result.output.splitlines() if line.startswith('{"error"'))
    return json.loads(line)["error"]


class TestCommands:
    def test_simulate_writes_dataset_and_residuals(self, dataset_dir):
        for name in ("anchors.csv", "tags.csv", "odometry.csv", "ranges.csv", "truth.csv", "meta.json",
                     "residuals.csv"):
            assert os.path.exists(os.path.join(dataset_dir, name))
        assert read_provenance(os.path.join(dataset_dir, "ranges.csv"))["seed"] == "9"

    def test_fit_noise_writes_a_model_document(self, runner, dataset_dir, tmp_path):
        output = str(tmp_path / "models")
        result = runner.invoke(cli, [
            "fit-noise", os.path.join(dataset_dir, "residuals.csv"), "--kind", "asym_cauchy", "--output", output,
        ])
        assert result.exit_code == ExitCodes.SUCCESS, result.output
        with open(os.path.join(output, "asym_cauchy.json")) as f:
            document = json.load(f)
        assert document["model"]["type"] == "asym_cauchy"
        assert document["n_samples"] == 400

    def test_estimate_then_evaluate(self, runner, config_path, dataset_dir, tmp_path):
        estimate_dir = str(tmp_path / "map-c")
        result = runner.invoke(cli, [
            "estimate", dataset_dir, "--config", config_path, "--method", "map-c", "--output", estimate_dir,
        ])
        assert result.exit_code == ExitCodes.SUCCESS, result.output
        trajectory = read_table(os.path.join(estimate_dir, "trajectory.csv"))
        assert len(trajectory) == 9
        assert os.path.exists(os.path.join(estimate_dir, "trace.csv"))

        result = runner.invoke(cli, [
            "evaluate", estimate_dir, dataset_dir, "--config", config_path, "--method", "map-c",
        ])
        assert result.exit_code == ExitCodes.SUCCESS, result.output
        summary = read_table(os.path.join(estimate_dir, "summary.csv"))
        assert summary["estimator"].tolist() == ["map-c"]
        assert summary["rmse_trans_m"][0] >= 0.0

    def test_montecarlo_writes_models_and_report(self, runner, config_path, tmp_path):
        output = str(tmp_path / "mc")
        result = runner.invoke(cli, ["montecarlo", "--config", config_path, "--output", output])
        assert result.exit_code == ExitCodes.SUCCESS, result.output
        assert os.path.exists(os.path.join(output, "aggregate.tsv"))
        for method in ("map-c", "map-gmm", "esgvi"):
            assert os.path.exists(os.path.join(output, "models", f"{method}.json"))


class TestExitCodes:
    def test_invalid_config_exits_with_config_error(self, runner, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"sim": {"corruption_fraction": 1.5}}')
        result = runner.invoke(cli, ["simulate", "--config", str(path), "--output", str(tmp_path / "out")])
        assert result.exit_code == ExitCodes.CONFIG_ERROR
        assert error_payload(result)["code"] == "CONFIG_SCHEMA_ERROR"

    def test_unparseable_config(self, runner, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"sim": ')
        result = runner.invoke(cli, ["simulate", "--config", str(path), "--output", str(tmp_path / "out")])
        assert result.exit_code == ExitCodes.CONFIG_ERROR

    def test_missing_dataset_exits_with_data_error(self, runner, config_path, tmp_path):
        result = runner.invoke(cli, [
            "estimate", str(tmp_path / "nowhere"), "--config", config_path, "--output", str(tmp_path / "out"),
        ])
        assert result.exit_code == ExitCodes.DATA_ERROR
        assert "message" in error_payload(result)

    def test_unknown_anchor_exits_with_data_error(self, runner, config_path, dataset_dir, tmp_path):
        ranges_path = os.path.join(dataset_dir, "ranges.csv")
        with open(ranges_path) as f:
            lines = f.readlines()
        fields = lines[2].split(",")
        fields[2] = "77"
        lines[2] = ",".join(fields)
        with open(ranges_path, "w") as f:
            f.writelines(lines)
        result = runner.invoke(cli, [
            "estimate", dataset_dir, "--config", config_path, "--output", str(tmp_path / "out"),
        ])
        assert result.exit_code == ExitCodes.DATA_ERROR
        assert error_payload(result)["code"] == "UNKNOWN_ID"
