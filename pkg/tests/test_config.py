from __future__ import annotations

import json

import pytest

from sitsim.config import ConfigError, SimConfig, config_from_dict, load_config


def test_defaults_are_valid():
    cfg = SimConfig()
    assert cfg.scheme == "scue"
    assert cfg.cache_lines == 4096
    assert not cfg.is_bmt


@pytest.mark.parametrize("changes", [
    {"scheme": "fast"}, {"hash_cycles": 0}, {"mem_size": 3 << 20}, {"minor_bits": 0},
    {"root_persist": "sometimes"}, {"cache_kib": 1, "cache_ways": 3}, {"nvm_write_banks": 0},
    {"hash_cycles": "80"},
])
def test_invalid_values_rejected(changes):
    with pytest.raises(ConfigError):
        SimConfig().replace(**changes)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        SimConfig().replace(hash_latency=3)
    with pytest.raises(ConfigError):
        config_from_dict({"hash_latency": 3})


def test_digest_tracks_content():
    a = SimConfig()
    assert a.digest() == SimConfig().digest()
    assert a.digest() != a.replace(seed=1).digest()
    assert len(a.digest()) == 32


def test_load_yaml_and_json(tmp_path):
    y = tmp_path / "c.yaml"
    y.write_text("scheme: eager\nhash_cycles: 160\n")
    assert load_config(y) == SimConfig(scheme="eager", hash_cycles=160)
    j = tmp_path / "c.json"
    j.write_text(json.dumps(SimConfig(seed=9).to_dict()))
    assert load_config(j) == SimConfig(seed=9)
