import pytest

from calm.config import (CONFIG_ENV_VAR, ConfigError, ExperimentConfig, LossWeights, ModelConfig,
                         apply_override, default_tap_layers)


def test_default_taps():
    assert default_tap_layers(12) == [3, 6, 9]
    assert default_tap_layers(4) == [1, 2, 3]
    assert default_tap_layers(1) == []


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.loss.attention == pytest.approx(0.55)
    assert cfg.decode.mu == 0.1


def test_save_load_round_trip(tmp_path):
    cfg = ExperimentConfig()
    apply_override(cfg, "optim.epochs=3")
    apply_override(cfg, "bias.train_list_range=[2,8]")
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg
    assert back.bias.train_list_range == (2, 8)


def test_env_var_selects_file(tmp_path, monkeypatch):
    cfg = ExperimentConfig()
    cfg.decode.mu = 0.5
    cfg.save(tmp_path / "c.json")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(tmp_path / "c.json"))
    assert ExperimentConfig.load().decode.mu == 0.5
    monkeypatch.delenv(CONFIG_ENV_VAR)
    assert ExperimentConfig.load().decode.mu == 0.1


def test_override_parsing():
    cfg = ExperimentConfig()
    apply_override(cfg, "decode.mode=beam")
    apply_override(cfg, "model.tap_layers=[1,3]")
    assert cfg.decode.mode == "beam" and cfg.model.taps == [1, 3]
    for bad in ("decode.nope=1", "nothing", "zzz.mode=1"):
        with pytest.raises(ConfigError):
            apply_override(cfg, bad)


def test_unknown_field_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": {"layers": 3}})


@pytest.mark.parametrize("path,value", [
    ("decode.mu", 0.0), ("decode.mu", 1.5), ("decode.mode", "sample"),
    ("model.tap_layers", [2, 1]), ("model.tap_layers", [4]), ("model.activation", "gelu"),
    ("bias.scope", "global"), ("optim.schedule", "cosine"), ("optim.no_bias_prob", 2.0),
    ("loss.ctc", 0.9), ("model.input_dim", 10), ("schema_version", 2), ("task", "video"),
])
def test_validation_errors(path, value):
    cfg = ExperimentConfig()
    obj, *rest = path.split(".")
    if rest:
        setattr(getattr(cfg, obj), rest[0], value)
    else:
        setattr(cfg, obj, value)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_loss_weight_bounds():
    LossWeights(ctc=0.5, vad=0.5).validate()
    with pytest.raises(ConfigError):
        LossWeights(interctc=-0.1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(num_layers=0).validate()
