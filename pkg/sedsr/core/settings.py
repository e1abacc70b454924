"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

实验配置与持久化服务
配置文件为 INI 格式的键值文档（section/key），命令行覆盖使用 section.key=value
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple, get_type_hints

from qtpy import QtCore

from .exceptions import ConfigurationError

EXTRACTOR_KINDS = ("clip_rn50", "resnet50", "toy")
FUSION_MODES = ("sefb", "concat", "channel_attention", "spatial_attention")
DISCRIMINATOR_FAMILIES = (
    "patch_sed", "unet_sed", "vgg_sed",
    "patch_vanilla", "unet_vanilla", "vgg_vanilla",
)
GAN_MODES = ("standard_bce", "literal_paper")
PIXEL_CRITERIA = ("l1", "l2")
PERCEPTUAL_ADAPTERS = ("vgg", "extractor", "none")
UPSAMPLERS = ("nearest", "pixelshuffle")
INIT_MODES = ("none", "psnr")

CACHE_ENV_VAR = "SED_SR_CACHE"


def cache_dir() -> Path:
    """预训练权重缓存目录（环境变量 SED_SR_CACHE，默认 ~/SedSR/cache）"""
    return Path(os.environ.get(CACHE_ENV_VAR) or Path.home() / "SedSR" / "cache").expanduser()


def _check(condition: bool, message: str):
    if not condition:
        raise ConfigurationError(message)


@dataclass
class ExtractorSettings:
    kind: str = "toy"
    layer: int = 3
    weights_path: str = ""
    seed: int = -1  # -1 表示沿用 train.seed

    def validate(self):
        _check(self.kind in EXTRACTOR_KINDS, f"extractor.kind 无效: {self.kind}")
        _check(1 <= self.layer <= 4, f"extractor.layer 必须在 1..4 之间: {self.layer}")


@dataclass
class SefbSettings:
    embed_dim: int = 0  # 0 表示取该阶段图像特征通道数
    heads: int = 4
    groupnorm_groups: int = 8
    fusion_mode: str = "sefb"

    def validate(self):
        _check(self.heads > 0, f"sefb.heads 必须为正: {self.heads}")
        _check(self.embed_dim >= 0, f"sefb.embed_dim 不能为负: {self.embed_dim}")
        _check(self.embed_dim == 0 or self.embed_dim % self.heads == 0,
               f"sefb.embed_dim={self.embed_dim} 不能被 heads={self.heads} 整除")
        _check(self.groupnorm_groups >= 1, "sefb.groupnorm_groups 必须 >= 1")
        _check(self.fusion_mode in FUSION_MODES, f"sefb.fusion_mode 无效: {self.fusion_mode}")


@dataclass
class DiscriminatorSettings:
    family: str = "patch_sed"
    base_channels: int = 64
    spectral_norm: bool = True
    sefb_stages: int = 2
    image_size: int = 256

    def validate(self):
        _check(self.family in DISCRIMINATOR_FAMILIES, f"disc.family 无效: {self.family}")
        _check(self.base_channels > 0, "disc.base_channels 必须为正")
        _check(0 <= self.sefb_stages <= 2, f"disc.sefb_stages 必须在 0..2 之间: {self.sefb_stages}")
        _check(self.image_size > 0 and self.image_size % 32 == 0,
               f"disc.image_size 必须是 32 的倍数: {self.image_size}")

    @property
    def is_semantic(self) -> bool:
        return self.family.endswith("_sed")


@dataclass
class GeneratorSettings:
    num_rrdb_blocks: int = 23
    feature_channels: int = 64
    growth_channels: int = 32
    residual_scale: float = 0.2
    upsampler: str = "nearest"
    sefb_block_indices: Tuple[int, ...] = ()

    def validate(self):
        _check(self.num_rrdb_blocks > 0, "gen.num_rrdb_blocks 必须为正")
        _check(self.feature_channels > 0 and self.growth_channels > 0, "gen 通道数必须为正")
        _check(self.upsampler in UPSAMPLERS, f"gen.upsampler 无效: {self.upsampler}")
        bad = [i for i in self.sefb_block_indices if not 1 <= i <= self.num_rrdb_blocks]
        _check(not bad, f"gen.sefb_block_indices 越界: {bad}")


@dataclass
class LossSettings:
    lambda_pixel: float = 1.0
    lambda_p: float = 1.0
    lambda_a: float = 5e-3
    gan_mode: str = "standard_bce"
    pixel_criterion: str = "l1"
    perceptual: str = "vgg"

    def validate(self):
        _check(min(self.lambda_pixel, self.lambda_p, self.lambda_a) >= 0, "损失权重必须非负")
        _check(self.gan_mode in GAN_MODES, f"loss.gan_mode 无效: {self.gan_mode}")
        _check(self.pixel_criterion in PIXEL_CRITERIA, f"loss.pixel_criterion 无效: {self.pixel_criterion}")
        _check(self.perceptual in PERCEPTUAL_ADAPTERS, f"loss.perceptual 无效: {self.perceptual}")


@dataclass
class DataSettings:
    root: str = ""
    synthetic_seed: int = -1  # -1 表示沿用 train.seed
    n_images: int = 8
    hr_size: int = 256
    patch_size: int = 256
    augment: bool = True
    num_workers: int = 0

    def validate(self):
        _check(self.patch_size > 0 and self.patch_size % 32 == 0,
               f"data.patch_size 必须是 32 的倍数: {self.patch_size}")
        _check(self.n_images > 0, "data.n_images 必须为正")
        _check(self.num_workers >= 0, "data.num_workers 不能为负")
        if not self.root:
            _check(self.hr_size >= self.patch_size, "合成数据的 hr_size 不能小于 patch_size")
            _check(self.hr_size % 4 == 0, "data.hr_size 必须是 4 的倍数")


@dataclass
class TrainSettings:
    iterations: int = 300000
    batch_size: int = 8
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    d_steps: int = 1
    milestones: Tuple[int, ...] = ()
    gamma: float = 0.5
    log_interval: int = 100
    checkpoint_interval: int = 5000
    init: str = "none"
    psnr_checkpoint: str = ""
    deterministic: bool = True
    plot_curves: bool = True
    eval_images: int = 2

    def validate(self):
        _check(self.iterations >= 0, f"train.iterations 不能为负: {self.iterations}")
        _check(self.batch_size > 0, "train.batch_size 必须为正")
        _check(self.lr_g > 0, f"train.lr_g 必须为正: {self.lr_g}")
        _check(self.lr_d >= 0, f"train.lr_d 不能为负: {self.lr_d}")
        _check(self.d_steps >= 1, "train.d_steps 必须 >= 1")
        _check(list(self.milestones) == sorted(self.milestones) and all(m > 0 for m in self.milestones),
               f"train.milestones 必须为递增正整数: {self.milestones}")
        _check(self.log_interval > 0 and self.checkpoint_interval > 0, "日志/检查点间隔必须为正")
        _check(self.init in INIT_MODES, f"train.init 无效: {self.init}")
        _check(self.eval_images >= 0, "train.eval_images 不能为负")


SECTION_TYPES = {
    "extractor": ExtractorSettings,
    "sefb": SefbSettings,
    "disc": DiscriminatorSettings,
    "gen": GeneratorSettings,
    "loss": LossSettings,
    "data": DataSettings,
    "train": TrainSettings,
}


@dataclass
class ExperimentSettings:
    extractor: ExtractorSettings = field(default_factory=ExtractorSettings)
    sefb: SefbSettings = field(default_factory=SefbSettings)
    disc: DiscriminatorSettings = field(default_factory=DiscriminatorSettings)
    gen: GeneratorSettings = field(default_factory=GeneratorSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def validate(self) -> "ExperimentSettings":
        for name in SECTION_TYPES:
            getattr(self, name).validate()
        return self

    def to_params(self) -> Dict[str, Any]:
        params = {}
        for name in SECTION_TYPES:
            section = getattr(self, name)
            for f in fields(section):
                params[f"{name}.{f.name}"] = getattr(section, f.name)
        return params

    @classmethod
    def from_params(cls, params: Dict[str, Any]) -> "ExperimentSettings":
        settings = cls()
        for key, value in params.items():
            settings._set(key, value)
        return settings

    def get(self, key: str) -> Any:
        section, name = self._split(key)
        return getattr(getattr(self, section), name)

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentSettings":
        """返回应用覆盖后的新配置，原配置不变"""
        settings = copy.deepcopy(self)
        for key, value in overrides.items():
            settings._set(key, value)
        return settings

    def extractor_seed(self) -> int:
        return self.extractor.seed if self.extractor.seed >= 0 else self.train.seed

    def data_seed(self) -> int:
        return self.data.synthetic_seed if self.data.synthetic_seed >= 0 else self.train.seed

    def _split(self, key: str) -> Tuple[str, str]:
        section, _, name = key.replace("/", ".").partition(".")
        if section not in SECTION_TYPES or name not in {f.name for f in fields(SECTION_TYPES[section])}:
            raise ConfigurationError(f"未知配置项: {key}")
        return section, name

    def _set(self, key: str, value: Any):
        section_name, name = self._split(key)
        section = getattr(self, section_name)
        hint = get_type_hints(type(section))[name]
        setattr(section, name, _coerce(value, hint, key))


def _coerce(value: Any, hint: Any, key: str) -> Any:
    try:
        if hint is bool:
            return _to_bool(value)
        if hint is int:
            if isinstance(value, str) and value.strip().lstrip("+-").isdigit():
                return int(value)
            number = float(value)
            if not number.is_integer():
                raise ValueError(value)
            return int(number)
        if hint is float:
            return float(value)
        if hint is str:
            return "" if value is None else str(value)
        if hint == Tuple[int, ...]:
            if isinstance(value, str):
                items = [item.strip() for item in value.split(",")]
            else:
                items = [str(item).strip() for item in (value or ())]
            return tuple(int(item) for item in items if item)
    except (TypeError, ValueError):
        raise ConfigurationError(f"配置项 {key} 的值无效: {value!r}") from None
    raise ConfigurationError(f"配置项 {key} 的类型不受支持: {hint}")


def _to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in {"1", "true", "yes", "on"}:
            return True
        if lowered in {"0", "false", "no", "off", ""}:
            return False
        raise ValueError(value)
    return bool(value)


def apply_overrides(settings: ExperimentSettings, overrides: Iterable[str]) -> ExperimentSettings:
    """应用命令行 --set key=value 覆盖"""
    parsed = {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"覆盖项格式应为 key=value: {item!r}")
        parsed[key.strip()] = value.strip()
    return settings.with_overrides(parsed)


def desk_preset() -> ExperimentSettings:
    """桌面规模预设：小型 RRDB、P+SeD、玩具提取器、合成数据"""
    return ExperimentSettings.from_params({
        "extractor.kind": "toy",
        "sefb.heads": 2,
        "disc.family": "patch_sed",
        "disc.base_channels": 16,
        "disc.image_size": 32,
        "gen.num_rrdb_blocks": 4,
        "gen.feature_channels": 32,
        "gen.growth_channels": 16,
        "loss.perceptual": "extractor",
        "data.n_images": 8,
        "data.hr_size": 64,
        "data.patch_size": 32,
        "train.iterations": 500,
        "train.batch_size": 2,
        "train.seed": 7,
        "train.log_interval": 50,
        "train.checkpoint_interval": 250,
    })


class SettingsService:
    """基于 QSettings（INI 格式）的实验配置服务"""

    def __init__(self, path):
        self._path = Path(path).expanduser()
        self._settings = QtCore.QSettings(str(self._path), QtCore.QSettings.Format.IniFormat)

    @property
    def path(self) -> Path:
        return self._path

    def load(self) -> ExperimentSettings:
        if not self._path.is_file():
            raise ConfigurationError(f"配置文件不存在: {self._path}")
        self._settings.sync()
        if self._settings.status() != QtCore.QSettings.Status.NoError:
            raise ConfigurationError(f"配置文件格式错误: {self._path}")
        params = {key: self._settings.value(key) for key in self._settings.allKeys()}
        return ExperimentSettings.from_params(params)

    def save(self, settings: ExperimentSettings):
        self._path.parent.mkdir(parents=True, exist_ok=True)
        for key, value in settings.to_params().items():
            self._settings.setValue(key.replace(".", "/"), self._to_storage(value))
        self._settings.sync()

    @staticmethod
    def _to_storage(value: Any) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return ",".join(str(item) for item in value)
        return repr(value) if isinstance(value, float) else str(value)


def load_settings(path=None, overrides: Iterable[str] = ()) -> ExperimentSettings:
    """加载配置文件（可选）并应用覆盖，返回校验后的配置"""
    settings = SettingsService(path).load() if path else ExperimentSettings()
    return apply_overrides(settings, overrides).validate()
