"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.
"""

import pytest

from sedsr.core.exceptions import ConfigurationError
from sedsr.core.settings import (
    CACHE_ENV_VAR, ExperimentSettings, SettingsService, apply_overrides, cache_dir, desk_preset, load_settings,
)


def test_defaults_validate():
    settings = ExperimentSettings().validate()
    assert settings.extractor.layer == 3
    assert settings.train.lr_g == 1e-4
    assert settings.loss.lambda_a == 5e-3
    assert settings.gen.num_rrdb_blocks == 23


def test_overrides_coerce_types():
    """--set 的字符串值按字段类型转换"""
    settings = apply_overrides(ExperimentSettings(), [
        "extractor.layer=2",
        "train.lr_g=2e-4",
        "data.augment=false",
        "train.milestones=100,200",
        "disc.family=unet_sed",
    ])
    assert settings.extractor.layer == 2
    assert settings.train.lr_g == 2e-4
    assert settings.data.augment is False
    assert settings.train.milestones == (100, 200)
    assert settings.disc.family == "unet_sed"


def test_overrides_do_not_mutate():
    base = ExperimentSettings()
    base.with_overrides({"train.seed": 5})
    assert base.train.seed == 0


@pytest.mark.parametrize("override", [
    "nosuch.key=1",
    "train.nosuch=1",
    "extractor.layer=abc",
    "train.batch_size=1.5",
    "missing_separator",
])
def test_bad_overrides(override):
    with pytest.raises(ConfigurationError):
        apply_overrides(ExperimentSettings(), [override])


@pytest.mark.parametrize("override", [
    "extractor.layer=5",
    "extractor.kind=vit",
    "sefb.embed_dim=10",
    "disc.family=stylegan",
    "loss.lambda_a=-1",
    "data.patch_size=48",
    "train.iterations=-1",
    "train.lr_g=0",
    "train.milestones=200,100",
])
def test_validation_rejects(override):
    with pytest.raises(ConfigurationError):
        load_settings(None, [override])


def test_derived_seeds():
    settings = ExperimentSettings().with_overrides({"train.seed": 11})
    assert settings.extractor_seed() == 11
    assert settings.data_seed() == 11
    settings = settings.with_overrides({"extractor.seed": 3, "data.synthetic_seed": 4})
    assert settings.extractor_seed() == 3
    assert settings.data_seed() == 4


def test_settings_service_round_trip(tmp_path):
    """INI 保存后读回得到相同的配置"""
    path = tmp_path / "experiment.ini"
    original = desk_preset().with_overrides({"train.milestones": "10,20", "loss.lambda_a": 0.0125})
    SettingsService(path).save(original)
    assert path.is_file()

    loaded = SettingsService(path).load()
    assert loaded.to_params() == original.to_params()


def test_settings_service_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        SettingsService(tmp_path / "missing.ini").load()


def test_load_settings_from_ini(tmp_path):
    path = tmp_path / "partial.ini"
    path.write_text("[train]\nseed=42\nbatch_size=4\n\n[extractor]\nlayer=2\n", encoding="utf-8")
    settings = load_settings(path, ["train.seed=43"])
    assert settings.train.seed == 43
    assert settings.train.batch_size == 4
    assert settings.extractor.layer == 2
    # 未出现的键使用默认值
    assert settings.disc.family == "patch_sed"


def test_desk_config_matches_preset():
    from pathlib import Path
    path = Path(__file__).resolve().parent.parent / "configs" / "desk.ini"
    loaded = load_settings(path)
    preset = desk_preset()
    for key in ("gen.num_rrdb_blocks", "disc.base_channels", "data.patch_size", "train.seed", "loss.perceptual"):
        assert loaded.get(key) == preset.get(key)


def test_cache_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv(CACHE_ENV_VAR, str(tmp_path))
    assert cache_dir() == tmp_path
