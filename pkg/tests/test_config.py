import pytest

from sglkf import config
from sglkf.errors import ConfigurationError

DEFAULTS = {"train.lr0": 5e-3, "train.total_epochs": 100, "tracker.enabled": True, "synth.speed_profile": (0.0, 20.0)}


def test_defaults_only():
    values, sources = config.resolve(DEFAULTS, {}, {}, {})
    assert values == DEFAULTS
    assert set(sources.values()) == {"default"}


def test_precedence_flag_env_file_default():
    file_values = {"train.lr0": "1e-3", "train.total_epochs": "50"}
    env = {"SPEEDTRACK_TRAIN_LR0": "2e-3", "SPEEDTRACK_TRAIN_TOTAL_EPOCHS": "70"}
    values, sources = config.resolve(DEFAULTS, file_values, env, {"train.lr0": 3e-3})
    assert values["train.lr0"] == 3e-3 and sources["train.lr0"] == "flag"
    assert values["train.total_epochs"] == 70 and sources["train.total_epochs"] == "env"
    values, sources = config.resolve(DEFAULTS, file_values, {}, {})
    assert values["train.total_epochs"] == 50 and sources["train.total_epochs"] == "file"


def test_none_flag_means_unset():
    values, sources = config.resolve(DEFAULTS, {}, {}, {"train.lr0": None})
    assert sources["train.lr0"] == "default"


def test_coercion():
    env = {"SPEEDTRACK_TRACKER_ENABLED": "off", "SPEEDTRACK_SYNTH_SPEED_PROFILE": "0, 30 60"}
    values, _ = config.resolve(DEFAULTS, {"train.total_epochs": "7"}, env, {})
    assert values["tracker.enabled"] is False
    assert values["synth.speed_profile"] == (0.0, 30.0, 60.0)
    assert isinstance(values["train.total_epochs"], int)


@pytest.mark.parametrize("key,text", [("train.total_epochs", "1.5"), ("tracker.enabled", "maybe"),
                                      ("train.lr0", "fast")])
def test_bad_values_raise(key, text):
    with pytest.raises(ConfigurationError):
        config.resolve(DEFAULTS, {key: text}, {}, {})


def test_unknown_file_key_raises():
    with pytest.raises(ConfigurationError, match="unknown"):
        config.resolve(DEFAULTS, {"train.lr": "1"}, {}, {})


def test_read_config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ntrain.lr0 = 1e-4  # inline\n\ntracker.enabled=no\n")
    assert config.read_config_file(p) == {"train.lr0": "1e-4", "tracker.enabled": "no"}
    p.write_text("train.lr0 1e-4\n")
    with pytest.raises(ConfigurationError, match=":1:"):
        config.read_config_file(p)


def test_env_key():
    assert config.env_key("tracker.base_age") == "SPEEDTRACK_TRACKER_BASE_AGE"
