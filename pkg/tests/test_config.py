import pytest

from scan2num.config import ConfigError, load_config, parse_config
from scan2num.model import NetworkConfig, scaled_config
from scan2num.train import TrainConfig


def test_empty_config_gives_protocol_defaults():
    cfg = parse_config("")
    assert cfg.network() == NetworkConfig()
    assert cfg.train("ve") == TrainConfig(target="ve")
    assert load_config(None).train() == TrainConfig()


def test_full_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# desk run\n"
        "[data]\nmanifest = m.csv\ntarget = fev1_fvc\n"
        "[network]\ninput_size = 64\nnum_slices = 8\nwidth_factor = 0.25\n"
        "[train]\nbase_lr = 0.001\nmax_iter = 3000\nval_every = 250\naugment = no\n"
        "[eval]\nresamples = 500\n"
        "[phantom]\ncount = 12\ndims = 64, 64, 64\nseverity_min = 0.1\n",
        encoding="utf-8")
    cfg = load_config(path)
    t = cfg.train()
    assert t.target == "fev1_fvc" and t.base_lr == 0.001 and t.max_iter == 3000 and not t.augment
    assert t.network == scaled_config(64, 8, 0.25)
    assert cfg.get("eval", "resamples") == 500
    assert cfg.phantom_template().dims == (64, 64, 64)
    assert cfg.severity_range() == (0.1, 1.0)


def test_overrides_and_none():
    cfg = parse_config("[train]\nseed = 3\n")
    cfg.override("train", "seed", None)
    assert cfg.train().seed == 3
    cfg.override("train", "seed", 9)
    assert cfg.train().seed == 9
    with pytest.raises(ConfigError):
        cfg.override("train", "nope", 1)


@pytest.mark.parametrize("text", [
    "[bogus]\na = 1\n",
    "[train]\nlearning_rate = 0.1\n",
    "[train]\nbatch_size = many\n",
    "[train]\naugment = maybe\n",
    "no section header\n",
    "[network]\ninput_size = 16\n",
])
def test_bad_configs_are_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text).train()


def test_bad_network_names_config_section():
    with pytest.raises(ConfigError, match="network"):
        parse_config("[network]\ninput_size = 16\n").network()


def test_keys_are_case_sensitive():
    with pytest.raises(ConfigError):
        parse_config("[train]\nBase_LR = 0.1\n")


def test_channel_override_sets_feature_dim():
    cfg = parse_config("[network]\ninput_size = 64\nwidth_factor = 0.125\nconv_channels = 4,8,8,16,16\n")
    net = cfg.network()
    assert net.conv_channels == (4, 8, 8, 16, 16) and net.feature_dim == 16
