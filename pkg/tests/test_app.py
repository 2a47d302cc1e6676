import json

import numpy as np
import pandas as pd
import pytest

import app
from app import build_parser, main
from src.model import GeMuCoModel

B_CONFIG = """\
train: {epochs: 3, batch_size: 32}
network: {hidden: [8]}
collect: {n_samples: 60}
iteropt: {iterations: 3}
estimate: {hidden: [theta]}
detect: {hidden: [l], n_calibration: 20}
control: {group: theta, loss: hold}
losses:
  hold:
    - {type: target_match, groups: [l], target: [200, 200, 200, 200]}
"""

A_CONFIG = """\
world: {name: A, states: [[500, 30], [500, 0]]}
train: {epochs: 2, batch_size: 32}
network: {hidden: [8], pb_dim: 2}
collect: {n_samples: 40}
online: {min_start: 5, buffer_capacity: 20}
"""


def _config(directory, text):
    path = directory / "experiment.yaml"
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def b_run(tmp_path_factory):
    """A trained world B model plus a small fresh CSV of world B samples."""
    root = tmp_path_factory.mktemp("b_run")
    config = _config(root, B_CONFIG)
    assert main(["train", "--config", config, "--out-dir", str(root / "model")]) == 0
    assert main(["collect", "--config", config, "--n", "30", "--seed", "1", "--out-dir", str(root / "data")]) == 0
    return {"config": config, "model": str(root / "model" / "model.json"), "data": str(root / "data" / "samples.csv")}


def test_parser_lists_every_command():
    parser = build_parser()
    args = parser.parse_args(["eval", "--scenario", "anomaly"])
    assert args.command == "eval"
    with pytest.raises(SystemExit):
        parser.parse_args(["eval", "--scenario", "nothing"])


def test_collect_writes_samples_and_manifest(tmp_path):
    code = main(["collect", "--world", "A", "--state", "500,30", "--n", "1000", "--out-dir", str(tmp_path)])

    assert code == 0
    df = pd.read_csv(tmp_path / "samples.csv", dtype={"state_id": str})
    assert len(df) == 1000
    assert set(df["state_id"]) == {"500_30"}
    assert list(df.columns[:3]) == ["state_id", "avail_theta", "avail_x_tool"]

    manifest = json.loads((tmp_path / "collect.manifest.json").read_text())
    assert manifest["seed"] == 0
    assert manifest["outputs"] == ["samples.csv"]
    assert manifest["config"]["world"]["name"] == "A"
    assert set(manifest["versions"]) == {"bodyschema", "python", "numpy", "scipy", "pandas"}


def test_invalid_config_exits_with_code_2(tmp_path, caplog):
    config = _config(tmp_path, "seed: 1\nbogus: true\n")

    code = main(["collect", "--config", config, "--out-dir", str(tmp_path / "out")])

    assert code == 2
    assert f"{config}:2:" in caplog.text


def test_training_twice_with_the_same_seed_is_byte_identical(tmp_path):
    config = _config(tmp_path, B_CONFIG)
    assert main(["train", "--config", config, "--out-dir", str(tmp_path / "first")]) == 0
    assert main(["train", "--config", config, "--out-dir", str(tmp_path / "second")]) == 0

    first = (tmp_path / "first" / "model.json").read_bytes()
    assert first == (tmp_path / "second" / "model.json").read_bytes()
    assert len(pd.read_csv(tmp_path / "first" / "training_loss.csv")) == 3
    assert not (tmp_path / "first" / "pb_map.csv").exists()


def test_train_with_parametric_bias_writes_the_pb_map_and_adapt_tracks_it(tmp_path):
    config = _config(tmp_path, A_CONFIG)
    assert main(["train", "--config", config, "--out-dir", str(tmp_path)]) == 0
    pb_map = pd.read_csv(tmp_path / "pb_map.csv", dtype={"state_id": str})
    assert sorted(pb_map["state_id"]) == ["500_0", "500_30"]

    assert main(["collect", "--config", config, "--state", "300,60", "--n", "30", "--out-dir", str(tmp_path / "new")]) == 0
    code = main([
        "adapt", "--config", config, "--model", str(tmp_path / "model.json"), "--start-state", "500_30",
        "--data", str(tmp_path / "new" / "samples.csv"), "--out-dir", str(tmp_path / "adapted"),
    ])

    assert code == 0
    trajectory = pd.read_csv(tmp_path / "adapted" / "pb_trajectory.csv")
    assert len(trajectory) == 30 - 5 + 2
    adapted = GeMuCoModel.load(tmp_path / "adapted" / "model_adapted.json")
    assert "adapted" in adapted.pb_table


def test_estimate_fills_the_hidden_group(b_run, tmp_path):
    code = main(["estimate", "--config", b_run["config"], "--model", b_run["model"], "--data", b_run["data"],
                 "--out-dir", str(tmp_path)])

    assert code == 0
    estimates = pd.read_csv(tmp_path / "estimates.csv")
    assert len(estimates) == 30
    assert {"theta_0", "theta_1", "f_0", "l_3"} <= set(estimates.columns)
    assert set(estimates["strategy"]) == {"direct_mask"}


def test_detect_scores_samples_after_calibration(b_run, tmp_path):
    code = main(["detect", "--config", b_run["config"], "--model", b_run["model"], "--data", b_run["data"],
                 "--out-dir", str(tmp_path)])

    assert code == 0
    detection = pd.read_csv(tmp_path / "detection.csv")
    assert list(detection.columns) == ["step", "d", "anomalous"]
    assert len(detection) == 10


def test_detect_without_enough_samples_fails(b_run, tmp_path):
    config = _config(tmp_path, B_CONFIG.replace("n_calibration: 20", "n_calibration: 30"))
    code = main(["detect", "--config", config, "--model", b_run["model"], "--data", b_run["data"],
                 "--out-dir", str(tmp_path)])
    assert code == 1


def test_detect_streams_a_residual_csv_without_a_model(monkeypatch, tmp_path):
    monkeypatch.setattr(app, "RESIDUAL_CHUNK", 7)
    rows = np.random.default_rng(0).normal(size=(40, 2))
    rows = np.vstack([rows, [[50.0, 50.0]]])
    residuals = tmp_path / "residuals.csv"
    pd.DataFrame(rows, columns=["e_0", "e_1"]).to_csv(residuals, index=False)
    config = _config(tmp_path, "detect: {n_calibration: 20}\n")

    code = main(["detect", "--config", config, "--residuals", str(residuals), "--out-dir", str(tmp_path)])

    assert code == 0
    detection = pd.read_csv(tmp_path / "detection.csv")
    assert list(detection["step"]) == list(range(21))
    assert bool(detection["anomalous"].iloc[-1])


def test_detect_needs_a_model_or_residuals(tmp_path):
    code = main(["detect", "--out-dir", str(tmp_path)])
    assert code == 2


def test_control_writes_the_value_and_its_trace(b_run, tmp_path):
    code = main(["control", "--config", b_run["config"], "--model", b_run["model"], "--out-dir", str(tmp_path)])

    assert code == 0
    value = pd.read_csv(tmp_path / "control.csv")
    assert {"strategy", "theta_0", "theta_1"} <= set(value.columns)


def test_control_without_a_loss_is_a_config_error(b_run, tmp_path):
    config = _config(tmp_path, "train: {epochs: 1}\n")
    code = main(["control", "--config", config, "--model", b_run["model"], "--out-dir", str(tmp_path)])
    assert code == 2


def test_simulate_writes_one_row_per_command(b_run, tmp_path):
    code = main(["simulate", "--config", b_run["config"], "--model", b_run["model"], "--data", b_run["data"],
                 "--out-dir", str(tmp_path)])

    assert code == 0
    simulation = pd.read_csv(tmp_path / "simulation.csv")
    assert len(simulation) == 30
    assert list(simulation["step"]) == list(range(30))


def test_missing_model_file_exits_with_code_1(tmp_path):
    code = main(["estimate", "--model", str(tmp_path / "missing.json"), "--out-dir", str(tmp_path)])
    assert code == 1
