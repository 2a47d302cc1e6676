import pytest

from src.config import DEFAULTS, ConfigError, ExperimentConfig, validate_environment, worker_count


def test_empty_config_uses_defaults():
    config = ExperimentConfig.from_text("")
    assert config.data == DEFAULTS
    assert config["world"]["name"] == "B"
    assert config.seed == 0


def test_partial_sections_keep_their_other_defaults():
    config = ExperimentConfig.from_text("train:\n  epochs: 5\n")
    assert config["train"]["epochs"] == 5
    assert config["train"]["batch_size"] == DEFAULTS["train"]["batch_size"]


def test_unknown_top_level_key_reports_its_line():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("seed: 1\nbogus: 2\n", "exp.yaml")
    assert info.value.line == 2
    assert str(info.value).startswith("exp.yaml:2:")


def test_unknown_nested_key_reports_its_line():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("train:\n  epochs: 5\n  lr: 0.1\n", "exp.yaml")
    assert info.value.line == 3
    assert "train.lr" in str(info.value)


def test_wrong_type_reports_its_line():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("seed: 3\ntrain:\n  epochs: fast\n", "exp.yaml")
    assert info.value.line == 3


def test_booleans_are_not_integers():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("seed: true\n")


def test_section_must_be_a_mapping():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("train: 5\n")
    assert info.value.line == 1


def test_unknown_world_name_is_rejected():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("world:\n  name: Z\n", "exp.yaml")
    assert info.value.line == 2


def test_invalid_yaml_reports_a_line():
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("seed: 1\ntrain: [1, 2\n", "exp.yaml")
    assert info.value.line is not None


def test_load_reads_a_file_and_keeps_its_path(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("seed: 4\nworld:\n  name: A\n")
    config = ExperimentConfig.load(path)
    assert config.seed == 4
    assert config.path == str(path)
    assert config["world"]["name"] == "A"


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.yaml")


def test_hash_follows_the_source_text():
    first = ExperimentConfig.from_text("seed: 1\n")
    assert first.sha256 == ExperimentConfig.from_text("seed: 1\n").sha256
    assert first.sha256 != ExperimentConfig.from_text("seed: 2\n").sha256


def test_with_seed_overrides_only_the_seed():
    config = ExperimentConfig.from_text("seed: 1\n")
    assert config.with_seed(None) is config
    assert config.with_seed(9).seed == 9
    assert config.seed == 1


def test_loss_records_lookup():
    config = ExperimentConfig.from_text("losses:\n  reach:\n    - {type: magnitude, group: f}\n  bad: 3\n")
    assert config.loss_records("reach") == [{"type": "magnitude", "group": "f"}]
    with pytest.raises(ConfigError):
        config.loss_records("missing")
    with pytest.raises(ConfigError):
        config.loss_records("bad")


def test_worker_count_from_environment(monkeypatch):
    monkeypatch.delenv("GEMUCO_THREADS", raising=False)
    monkeypatch.setenv("BODYSCHEMA_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("BODYSCHEMA_THREADS", "0")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("BODYSCHEMA_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.delenv("BODYSCHEMA_THREADS")
    assert worker_count() >= 1


def test_validate_environment_fills_defaults(monkeypatch):
    # delenv only records keys that exist
    for key in ("LOG_LEVEL", "GEMUCO_THREADS", "BODYSCHEMA_THREADS"):
        monkeypatch.setenv(key, "placeholder")
        monkeypatch.delenv(key)
    monkeypatch.setenv("BODYSCHEMA_OUT_DIR", "custom")

    env = validate_environment()

    assert env["LOG_LEVEL"] == "INFO"
    assert env["BODYSCHEMA_OUT_DIR"] == "custom"
    assert int(env["GEMUCO_THREADS"]) >= 1
    assert "BODYSCHEMA_THREADS" not in env


def test_gemuco_threads_takes_precedence(monkeypatch):
    monkeypatch.setenv("GEMUCO_THREADS", "2")
    monkeypatch.setenv("BODYSCHEMA_THREADS", "7")
    assert worker_count() == 2

    monkeypatch.setenv("GEMUCO_THREADS", "none")
    with pytest.raises(ConfigError, match="GEMUCO_THREADS"):
        worker_count()

    monkeypatch.setenv("GEMUCO_THREADS", "")
    assert worker_count() == 7
