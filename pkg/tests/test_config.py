import pytest

from noiseproj.config import (
    ConfigError, RunConfig, load_config, parse_config_text, write_default_config,
)


def test_default_config_file_round_trips(tmp_path):
    path = tmp_path / "run.cfg"
    write_default_config(path)
    cfg = load_config(path)
    assert cfg.hash() == RunConfig().hash()


def test_hash_is_stable_and_sensitive():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash()
    c = parse_config_text("tau_values = [1.0, 2.0]")
    assert c.hash() != a.hash()


def test_comments_and_blank_lines_ignored():
    cfg = parse_config_text("\n# comment\nT = 25   # trailing comment\n\n")
    assert cfg.schedule.T == 25


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("no_such_key = 1")


def test_missing_equals_rejected():
    with pytest.raises(ConfigError, match="expected"):
        parse_config_text("just some words")


def test_non_json_value_rejected():
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config_text("T = fifty")


def test_invalid_field_value_wrapped_as_config_error():
    with pytest.raises(ConfigError):
        parse_config_text("d_model = 10\nn_heads = 4")   # not divisible


def test_backbone_follows_world_shape():
    cfg = parse_config_text('latent_shape = [2, 4, 4]\nd_txt = 16')
    assert cfg.backbone.latent_shape == (2, 4, 4)
    assert cfg.backbone.d_txt == 16


def test_section_routing():
    text = "\n".join([
        "T = 30",
        "cfg_w = 1.5",
        "reward_epochs = 3",
        "train_tau = 120.0",
        "train_train_seed_range = [0, 10]",
        'out_dir = "elsewhere"',
        "data_seed_range = [0, 12]",
    ])
    cfg = parse_config_text(text)
    assert cfg.schedule.T == 30
    assert cfg.schedule.cfg_w == 1.5
    assert cfg.reward.epochs == 3
    assert cfg.train.tau == 120.0
    assert cfg.train.train_seed_range == (0, 10)
    assert cfg.out_dir == "elsewhere"
    assert cfg.data_seed_range == (0, 12)
