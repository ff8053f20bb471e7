import pytest

from pyrseg.config import ConfigError, default_config, format_config, load_config, parse_config


def test_defaults():
    cfg = default_config()
    assert cfg.train.epochs == 180 and cfg.train.validate_every == 30 and cfg.train.batch_size == 2
    assert cfg.cts.num_competitors == 3 and cfg.cts.stage_epochs * cfg.cts.num_stages == 180
    assert cfg.metrics.connectivity == 26 and cfg.metrics.min_fraction == 0.1
    assert cfg.data.split == (0.7, 0.1, 0.2)


def test_parse_overrides_and_comments():
    cfg = parse_config("""
        # comment line
        train.epochs = 60   # trailing comment
        train.validate_every = 20
        cts.stage_epochs = 10
        network.pyramid_bins = 1, 2, 4, 8
        metrics.postprocess = false
        train.loss_mode = weighted_ce
    """)
    assert cfg.train.epochs == 60 and cfg.cts.stage_epochs == 10
    assert cfg.network.pyramid_bins == (1, 2, 4, 8)
    assert cfg.metrics.postprocess is False and cfg.train.loss_mode == "weighted_ce"


@pytest.mark.parametrize("text, message", [
    ("train.epoch = 3", "unknown config key"),
    ("learning_rate = 3", "unknown config key"),
    ("bogus.x = 1", "unknown config key"),
    ("train.epochs", "expected"),
    ("train.epochs = many", "bad value"),
    ("metrics.postprocess = maybe", "bad value"),
    ("train.epochs = 100", "multiple"),
    ("metrics.connectivity = 8", "connectivity"),
    ("network.pyramid_bins = 1,2,3", "divisible"),
])
def test_parse_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


def test_echo_round_trip():
    cfg = parse_config("train.learning_rate = 0.00025\nnetwork.dropout_rate = 0.3\ndata.split = 0.6,0.2,0.2\n")
    text = format_config(cfg)
    assert parse_config(text) == cfg
    assert format_config(parse_config(text)) == text
    assert "train.learning_rate = 0.00025" in text.splitlines()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.txt")
