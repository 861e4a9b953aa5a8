import pytest
import yaml

from main import main
from src.config import RunConfig
from src.errors import ConfigError


def test_defaults():
    config = RunConfig()
    assert config.embedding.phase1_ratio == 0.01
    assert config.embedding.phase2_ratio == 0.1
    assert (config.embedding.lambda1, config.embedding.lambda2,
            config.embedding.lambda3, config.embedding.lambda4) == (1.0, 1.0, 0.01, 3.0)
    assert config.keys.m == 2000
    assert config.keys.candidate_factor == 4
    assert config.verification.threshold == 0.2
    assert config.attacks.prune_rates[-1] == 1.0


def test_yaml_round_trip(tmp_path):
    config = RunConfig.from_dict({"run": {"seed": 7}, "data": {"task": "synthetic-10", "train_limit": None}})
    path = config.save(str(tmp_path / "config.yaml"))
    loaded = RunConfig.load(path)
    assert loaded == config
    assert loaded.digest() == config.digest()
    assert loaded.data.train_limit is None


def test_digest_covers_seeds():
    assert RunConfig().digest() != RunConfig.from_dict({"run": {"seed": 1}}).digest()


def test_partial_sections_keep_defaults():
    config = RunConfig.from_dict({"schedules": {"phase2": {"epochs": 3}}})
    assert config.schedules.phase2.epochs == 3
    assert config.schedules.phase2.batch_size == 128
    assert config.schedules.phase1.epochs == 10


def test_integers_are_accepted_for_floats():
    assert RunConfig.from_dict({"verification": {"threshold": 0.25}}).verification.threshold == 0.25
    assert RunConfig.from_dict({"embedding": {"margin": 2}}).embedding.margin == 2.0


@pytest.mark.parametrize("data, field", [
    ({"keys": {"n": 5}}, "keys.n"),
    ({"extras": {}}, "extras"),
    ({"keys": {"m": "many"}}, "keys.m"),
    ({"run": {"seed": 1.5}}, "run.seed"),
    ({"run": {"deterministic": "yes"}}, "run.deterministic"),
    ({"attacks": {"temperatures": [1, "hot"]}}, "attacks.temperatures[1]"),
    ({"keys": {"m": 0}}, "keys.m"),
    ({"verification": {"threshold": 1.0}}, "verification.threshold"),
    ({"models": {"victim": "resnet"}}, "models.victim"),
    ({"schedules": {"phase1": {"epochs": 0}}}, "schedules.phase1.epochs"),
    ({"embedding": {"phase1_ratio": 1.0}}, "embedding.phase1.watermark_ratio"),
    ({"embedding": {"lambda4": -1}}, "embedding.lambda4"),
    ({"attacks": {"finetune_modes": ["FTXX"]}}, "attacks.finetune_modes"),
    ({"watermark": {"source_classes": [1, 2, 3]}}, "watermark.source_classes"),
])
def test_invalid_values_name_the_field(data, field):
    with pytest.raises(ConfigError) as error:
        RunConfig.from_dict(data)
    assert error.value.field == field


def test_missing_dataset_path(tmp_path):
    with pytest.raises(ConfigError, match="data.task: dataset path not found"):
        RunConfig.from_dict({"data": {"task": str(tmp_path / "nope")}})
    assert RunConfig.from_dict({"data": {"task": str(tmp_path)}}).data.task == str(tmp_path)


def test_catalog_placeholder_is_not_a_dataset():
    with pytest.raises(ConfigError, match="data.task"):
        RunConfig.from_dict({"data": {"task": "synthetic-<C>"}})


def test_invalid_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("run: [unclosed\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        RunConfig.load(str(path))


def test_cli_exits_with_two_on_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("keys:\n  m: 0\n")
    assert main(["-q", "run", "--config", str(bad)]) == 2
    assert "keys.m" in capsys.readouterr().err
    assert main(["-q", "config", "--validate", str(tmp_path / "missing.yaml")]) == 2


def test_cli_prints_loadable_defaults(capsys):
    assert main(["-q", "config", "--print-defaults"]) == 0
    printed = yaml.safe_load(capsys.readouterr().out)
    assert RunConfig.from_dict(printed) == RunConfig()


def test_cli_validates_a_file(tmp_path, capsys):
    path = RunConfig.from_dict({"data": {"task": "synthetic-10"}}).save(str(tmp_path / "ok.yaml"))
    assert main(["-q", "config", "--validate", path]) == 0
    assert "OK" in capsys.readouterr().out


def test_cli_guarantees(capsys):
    assert main(["-q", "guarantees", "--n", "10", "-k", "10", "-t", "0.2", "--alpha", "1e-6"]) == 0
    out = capsys.readouterr().out
    assert "0.263901" in out
    assert "r1 = 1/210" in out
    assert "minimum key size" in out


def test_config_without_an_action_is_a_usage_error(capsys):
    assert main(["-q", "config"]) == 2
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "--print-defaults" in captured.err
