import pytest

from mfevit.config import (
    ExperimentConfig, ModelConfig, TrainConfig, dump_config, from_flat, load_config, parse_config_text, save_config,
)
from mfevit.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.model.embed_dim, cfg.model.num_layers, cfg.model.num_heads) == (384, 12, 6)
    assert (cfg.model.num_subclasses, cfg.model.delta) == (5, 0.4)
    assert cfg.train.lr == 4e-5 and cfg.train.batch_size == 16 and cfg.train.epochs == 130
    assert (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.999) and cfg.train.sf_start_epoch == 20
    assert cfg.model.num_patches == 196 and cfg.model.num_labels == 36


def test_dump_and_load_round_trip(tmp_path):
    cfg = ExperimentConfig().replace(embed_dim=64, num_heads=4, lr=9.765625e-4, augment=False, fusion_mode="naive")
    save_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_parse_comments_and_spacing():
    assert parse_config_text("# note\n lr = 0.1  # inline\n\nepochs=3\n") == {"lr": "0.1", "epochs": "3"}


def test_parse_errors():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("lr = 1\nlr = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words\n")


def test_every_problem_is_listed():
    with pytest.raises(ConfigError) as err:
        from_flat({"bogus": 1, "epochs": "x", "num_subclasses": -1, "lr": -1, "embed_dim": 10, "num_heads": 3})
    msg = str(err.value)
    for key in ("bogus", "epochs", "num_subclasses", "lr", "embed_dim"):
        assert key in msg


def test_overrides_beat_file(tmp_path):
    (tmp_path / "c.txt").write_text("epochs = 5\nseed = 1\n")
    cfg = load_config(tmp_path / "c.txt", {"seed": 9})
    assert cfg.train.epochs == 5 and cfg.train.seed == 9


def test_value_coercion():
    cfg = from_flat({"augment": "off", "sf_enabled": "yes", "batch_size": "8.0", "delta": "0.25"})
    assert cfg.augmentation.augment is False and cfg.train.sf_enabled is True
    assert cfg.train.batch_size == 8 and cfg.model.delta == 0.25
    with pytest.raises(ConfigError):
        from_flat({"batch_size": "2.5"})
    with pytest.raises(ConfigError):
        from_flat({"augment": "maybe"})


def test_structural_invariants():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(image_size=30, patch_size=16)
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(embed_dim=10, num_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(fusion_mode="late")
    with pytest.raises(ConfigError):
        TrainConfig(cv_folds=1)


def test_dump_lists_every_key():
    text = dump_config(ExperimentConfig())
    keys = set(parse_config_text(text))
    assert keys == set(ExperimentConfig().to_flat())
