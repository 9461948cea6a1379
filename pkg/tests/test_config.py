import dataclasses

import pytest

from coda import config as config_mod
from coda.config import RunConfig, config_hash, from_dict
from coda.scenegen import DatasetConfig


def test_round_trip_is_lossless(tmp_path):
    cfg = RunConfig(
        seed=9,
        tau=0.05,
        data=DatasetConfig(seed=2, size=32, counts={"source": 3, "m1": 3, "m2": 2, "target": 4}),
        lr_decoder=0.02,
    )
    path = tmp_path / "cfg.json"
    config_mod.save(cfg, path)
    back = config_mod.load(path)
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_hash_ignores_paths_but_not_knobs():
    a = RunConfig()
    b = dataclasses.replace(a, data_dir="/elsewhere", run_root="/tmp/other")
    c = dataclasses.replace(a, tau=0.05)
    d = dataclasses.replace(a, data=DatasetConfig(seed=99))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert config_hash(a) != config_hash(d)


def test_unknown_keys_rejected():
    with pytest.raises(config_mod.ConfigError, match="unknown config keys"):
        from_dict({"sigma": 0.5, "mystery_knob": 3})


def test_strategy_validated():
    with pytest.raises(config_mod.ConfigError, match="unknown strategy"):
        RunConfig(strategy="nope")


def test_helper_views():
    cfg = RunConfig()
    assert cfg.budgets().chain_end == 600
    assert cfg.savpt_cfg().patch_size == 8
    assert cfg.severity_cfg().tau == 0.38
