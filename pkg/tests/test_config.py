import json

import pytest

from nvm.config import ConfigError, RunConfig, config_from_dict, load_config


def test_defaults_roundtrip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(RunConfig().dumps())
    cfg = load_config(path)
    assert cfg == RunConfig()
    assert cfg.net.D == 12 and cfg.net.n == 5 and cfg.train.lam_rec == 0.01


def test_missing_path_gives_defaults():
    assert load_config(None) == RunConfig()


def test_partial_override():
    cfg = config_from_dict({"net": {"D": 6, "enc_widths": [8, 16, 32]}, "train": {"lr": 1e-3}})
    assert cfg.net.D == 6 and cfg.net.enc_widths == (8, 16, 32)
    assert cfg.train.lr == 1e-3 and cfg.train.batch == RunConfig().train.batch


@pytest.mark.parametrize("data", [
    {"nett": {}},
    {"net": {"depth": 3}},
    {"train": 5},
    {"data": {"kinds": ["lava"]}},
    {"net": {"H": 6, "W": 8}},
])
def test_rejects_bad_entries(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_dump_is_json():
    data = json.loads(RunConfig().dumps())
    assert set(data) == {"seed", "net", "data", "train", "augment", "grid", "eval", "paths"}
