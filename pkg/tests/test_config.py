import pytest

from sacn.config import (PRESETS, ConfigError, RunConfig, load_config, override,
                         parse_overrides, parse_text, preset)


def test_defaults_follow_medical_setup():
    cfg = preset("medical")
    assert (cfg.train.batch_size, cfg.train.lr, cfg.train.epochs) == (64, 1e-3, 30)
    assert (cfg.loss.lam, cfg.model.init_variance, cfg.model.height) == (0.5, 0.15, 16)
    assert cfg.model.routing_iters == 1 and cfg.model.mode == "sacn"


@pytest.mark.parametrize("name,batch", [("mnist", 64), ("cifar", 64), ("svhn", 32)])
def test_natural_image_presets(name, batch):
    cfg = preset(name)
    assert cfg.train.batch_size == batch and cfg.train.lr == 2e-4
    assert cfg.train.epochs == 60 and cfg.model.init_variance == 0.01


def test_text_round_trip_for_every_preset():
    for name in PRESETS:
        cfg = preset(name)
        assert RunConfig.from_text(cfg.to_text()) == cfg


def test_parse_text_comments_and_errors():
    assert parse_text("# c\n train.lr = 0.5  # note\n\n") == {"train.lr": "0.5"}
    with pytest.raises(ConfigError, match="line 1"):
        parse_text("train.lr 0.5")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_text("seed = 1\nseed = 2")


def test_override_coerces_and_rejects():
    cfg = override(RunConfig(), {"train.lr": "0.01", "model.routing_iters": "3",
                                 "loss.lambda": "0.25", "seed": 9})
    assert cfg.train.lr == 0.01 and cfg.model.routing_iters == 3
    assert cfg.loss.lam == 0.25 and cfg.seed == 9
    with pytest.raises(ConfigError, match="unknown"):
        override(cfg, {"train.learning_rate": 1})
    with pytest.raises(ConfigError, match="cannot read"):
        override(cfg, {"train.batch_size": "many"})
    with pytest.raises(ConfigError):
        override(cfg, {"model.mode": "fancy"})
    with pytest.raises(ConfigError):
        override(cfg, {"attention.softmax_axis": "k"})
    with pytest.raises(ConfigError):
        override(cfg, {"loss.m_plus": 0.05})


def test_preset_keyword_overrides_and_unknown_preset():
    assert preset("miniature", model__routing_iters=3).model.routing_iters == 3
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("imagenet")


def test_load_config_and_parse_overrides(tmp_path):
    (tmp_path / "run.cfg").write_text("model.mode = baseline\ntrain.max_steps = 5\n")
    cfg = load_config(tmp_path / "run.cfg", preset("synthetic-simple"))
    assert cfg.model.mode == "baseline" and cfg.model.feature_channels == 32
    assert parse_overrides(["a.b=1", " c = x=y "]) == {"a.b": "1", "c": "x=y"}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def test_with_mode_and_input_size():
    cfg = preset("cifar")
    assert cfg.with_mode("baseline").model.mode == "baseline"
    assert cfg.model.input_size == 3 * 32 * 32
