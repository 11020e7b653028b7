from pathlib import Path

import pytest

from latent_bridge.config import (
    ModelDims,
    TrainConfig,
    config_from_dict,
    config_hash,
    dump_config,
    load_config,
    parse_overrides,
)
from latent_bridge.errors import ConfigError

INFRA = Path(__file__).resolve().parents[1] / "infrastructure"


def test_shipped_defaults_match_dataclass():
    assert load_config(str(INFRA / "config.yaml")) == TrainConfig()


def test_defaults():
    config = TrainConfig()
    assert config.dims.grid_side == 8
    assert config.dims.num_tokens == 64
    assert config.dims.latent_channels == 48
    assert config.bridge_tokens == 64
    assert config.sampler.inference_steps == 28
    assert config.sampler.conditioning_scale == 0.7
    assert config.sampler.decode_steps == 64


def test_smoke_profile_overrides_budget_only():
    smoke = load_config(str(INFRA / "smoke.yaml"))
    assert smoke.pretrain_steps == 20
    assert smoke.sampler.decode_steps == 8
    assert smoke.dims == ModelDims()


def test_dotted_overrides_are_coerced():
    config = load_config(None, parse_overrides(["dims.embed_dim=8", "learning_rate=0.01", "token_count=16"]))
    assert config.dims.embed_dim == 8
    assert config.learning_rate == 0.01
    assert config.bridge_tokens == 16


@pytest.mark.parametrize("pairs", [["nope=1"], ["dims.nope=1"], ["missing_equals"]])
def test_bad_overrides(pairs):
    with pytest.raises(ConfigError):
        load_config(None, parse_overrides(pairs))


@pytest.mark.parametrize(
    "data",
    [
        {"batch_size": 0},
        {"learning_rate": -1.0},
        {"branch_steps": -1},
        {"token_count": -4},
        {"phase": "finetune"},
        {"unknown_key": 1},
        {"dims": {"patch_size": 5}},
        {"dims": {"patch_size": 32}},
        {"dims": {"embed_dim": 15}},
        {"dims": {"cn_double_blocks": 9}},
        {"sampler": "fast"},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_dump_and_reload(tmp_path):
    config = TrainConfig(seed=3, dims=ModelDims(embed_dim=8))
    for name in ("snap.yaml", "snap.toml"):
        dump_config(config, str(tmp_path / name))
        assert load_config(str(tmp_path / name)) == config


def test_missing_or_unknown_format(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))
    (tmp_path / "c.json").write_text("{}")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "c.json"))


def test_config_hash_excludes_swept_keys():
    a = TrainConfig(token_count=4)
    b = TrainConfig(token_count=16)
    assert config_hash(a) != config_hash(b)
    assert config_hash(a, exclude=["token_count"]) == config_hash(b, exclude=["token_count"])
    assert config_hash(a, exclude=["sampler.decode_steps"]) != config_hash(b, exclude=["sampler.decode_steps"])
