import json

import pytest

from muranet.config import (
    ConfigError,
    ModelConfig,
    SynthSpec,
    TrainConfig,
    desk_train_config,
    dump_config,
    load_config,
    full_scale_model_config,
    full_scale_train_config,
)


def test_defaults_validate():
    assert ModelConfig().input_size == (128, 128)
    assert TrainConfig().max_lr == 0.01
    assert SynthSpec().splits == {"train": 40, "val": 5, "test": 5}


def test_indivisible_input_size_names_field():
    with pytest.raises(ConfigError, match="input size not divisible by 32"):
        ModelConfig(input_size=(1537, 1536))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(stage_channels=(64, 32, 160, 256)),
        dict(stage_depths=(2, 0, 2, 2)),
        dict(mura_convs=0),
        dict(num_seg_classes=1),
        dict(det_levels=(4, 8)),
        dict(mlp_ratio=0),
    ],
)
def test_invalid_model_config(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(initial_lr=0.1, max_lr=0.01),
        dict(min_lr=1.0),
        dict(warmup_epochs=200, total_epochs=200),
        dict(obj_target="mse"),
        dict(conf_threshold=1.0),
    ],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_presets():
    assert desk_train_config().max_lr == 0.1
    p = full_scale_train_config()
    assert (p.batch_size, p.total_epochs, p.warmup_epochs, p.max_lr) == (10, 1000, 50, 0.01)
    assert full_scale_model_config().input_size == (1536, 1536)


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"total_epochs": 7, "warmup_epochs": 2}, "model": {"input_size": [64, 64]}}))
    cfg = load_config(path, ["train.max_lr=0.05", "model.decoupled_head=false", "synth.splits={\"train\": 2}"])
    assert cfg["train"].total_epochs == 7
    assert cfg["train"].max_lr == 0.05
    assert cfg["model"].input_size == (64, 64)
    assert cfg["model"].decoupled_head is False
    assert cfg["synth"].splits == {"train": 2}
    again = load_config(None, [])
    assert again["train"].total_epochs == 200


def test_run_length_override_derives_warmup():
    assert load_config(None, ["train.total_epochs=2"])["train"].warmup_epochs == 0
    assert load_config(None, ["train.total_epochs=1000"])["train"].warmup_epochs == 50
    cfg = load_config(None, ["train.total_epochs=40", "train.warmup_epochs=3"])
    assert cfg["train"].warmup_epochs == 3


@pytest.mark.parametrize(
    "override",
    ["train.unknown=1", "nosection.x=1", "train.total_epochs=abc", "model.decoupled_head=maybe", "train.total_epochs"],
)
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_unknown_keys_in_file_rejected(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": 1}}))
    with pytest.raises(ConfigError, match="lr"):
        load_config(path)


def test_dump_round_trip(tmp_path):
    cfg = load_config(None, ["train.total_epochs=3", "train.warmup_epochs=1"])
    path = tmp_path / "r.json"
    path.write_text(json.dumps(dump_config(cfg)))
    back = load_config(path)
    assert dump_config(back) == dump_config(cfg)
