"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

超分生成器
RRDB 主干（×4）以及在指定 RRDB 块之后接入 SeFB 的 Se-RRDB 变体
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ConfigurationError, ContractError
from .sefb import Semantics, SemanticFusionBlock
from .semantic_extractor import INPUT_MULTIPLE, STAGE_CHANNELS, SemanticExtractor, SemanticMap, fit_to_multiple
from .settings import ExperimentSettings, UPSAMPLERS

logger = logging.getLogger("sedsr.generator")

SCALE_FACTOR = 4

PRESETS = {
    "tiny": 4,
    "appendix": 11,
    "full": 23,
}

# Se-RRDB 中接入语义融合的块序号（从 1 开始）
APPENDIX_SEFB_BLOCKS = (5, 11)


@dataclass(frozen=True)
class GeneratorSpec:
    num_rrdb_blocks: int = 23
    feature_channels: int = 64
    growth_channels: int = 32
    residual_scale: float = 0.2
    scale_factor: int = SCALE_FACTOR
    upsampler: str = "nearest"
    sefb_block_indices: Tuple[int, ...] = ()
    semantic_channels: int = 1024
    heads: int = 4
    groupnorm_groups: int = 8

    def __post_init__(self):
        if self.scale_factor != SCALE_FACTOR:
            raise ConfigurationError(f"只支持 ×{SCALE_FACTOR} 超分: {self.scale_factor}")
        if self.num_rrdb_blocks <= 0:
            raise ConfigurationError(f"num_rrdb_blocks 必须为正: {self.num_rrdb_blocks}")
        if self.upsampler not in UPSAMPLERS:
            raise ConfigurationError(f"未知的上采样方式: {self.upsampler}")
        bad = [i for i in self.sefb_block_indices if not 1 <= i <= self.num_rrdb_blocks]
        if bad:
            raise ConfigurationError(f"sefb_block_indices 越界: {bad}")

    @classmethod
    def preset(cls, name: str, semantic: bool = False, **kwargs) -> "GeneratorSpec":
        if name not in PRESETS:
            raise ConfigurationError(f"未知的生成器预设: {name}")
        blocks = PRESETS[name]
        indices = tuple(i for i in APPENDIX_SEFB_BLOCKS if i <= blocks) if semantic else ()
        return cls(num_rrdb_blocks=blocks, sefb_block_indices=indices, **kwargs)

    @classmethod
    def from_settings(cls, settings: ExperimentSettings) -> "GeneratorSpec":
        gen = settings.gen
        return cls(
            num_rrdb_blocks=gen.num_rrdb_blocks,
            feature_channels=gen.feature_channels,
            growth_channels=gen.growth_channels,
            residual_scale=gen.residual_scale,
            upsampler=gen.upsampler,
            sefb_block_indices=tuple(gen.sefb_block_indices),
            semantic_channels=STAGE_CHANNELS[settings.extractor.layer - 1],
            heads=settings.sefb.heads,
            groupnorm_groups=settings.sefb.groupnorm_groups,
        )

    @property
    def is_semantic(self) -> bool:
        return bool(self.sefb_block_indices)

    def to_dict(self) -> dict:
        return {
            "num_rrdb_blocks": self.num_rrdb_blocks,
            "feature_channels": self.feature_channels,
            "growth_channels": self.growth_channels,
            "residual_scale": self.residual_scale,
            "upsampler": self.upsampler,
            "sefb_block_indices": list(self.sefb_block_indices),
            "semantic_channels": self.semantic_channels,
            "heads": self.heads,
            "groupnorm_groups": self.groupnorm_groups,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        data = dict(data)
        data["sefb_block_indices"] = tuple(data.get("sefb_block_indices", ()))
        return cls(**data)


def _scaled_kaiming(module: nn.Module, scale: float = 0.1):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight)
            m.weight.data.mul_(scale)
            if m.bias is not None:
                m.bias.data.zero_()


class ResidualDenseBlock(nn.Module):
    """五层稠密连接卷积 + 残差缩放"""

    def __init__(self, num_feat: int = 64, num_grow_ch: int = 32, residual_scale: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        self.conv1 = nn.Conv2d(num_feat, num_grow_ch, 3, 1, 1)
        self.conv2 = nn.Conv2d(num_feat + num_grow_ch, num_grow_ch, 3, 1, 1)
        self.conv3 = nn.Conv2d(num_feat + 2 * num_grow_ch, num_grow_ch, 3, 1, 1)
        self.conv4 = nn.Conv2d(num_feat + 3 * num_grow_ch, num_grow_ch, 3, 1, 1)
        self.conv5 = nn.Conv2d(num_feat + 4 * num_grow_ch, num_feat, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)
        _scaled_kaiming(self)

    def forward(self, x: Tensor) -> Tensor:
        x1 = self.lrelu(self.conv1(x))
        x2 = self.lrelu(self.conv2(torch.cat((x, x1), 1)))
        x3 = self.lrelu(self.conv3(torch.cat((x, x1, x2), 1)))
        x4 = self.lrelu(self.conv4(torch.cat((x, x1, x2, x3), 1)))
        x5 = self.conv5(torch.cat((x, x1, x2, x3, x4), 1))
        return x5 * self.residual_scale + x


class RRDB(nn.Module):
    """Residual in Residual Dense Block"""

    def __init__(self, num_feat: int, num_grow_ch: int = 32, residual_scale: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        self.rdb1 = ResidualDenseBlock(num_feat, num_grow_ch, residual_scale)
        self.rdb2 = ResidualDenseBlock(num_feat, num_grow_ch, residual_scale)
        self.rdb3 = ResidualDenseBlock(num_feat, num_grow_ch, residual_scale)

    def forward(self, x: Tensor, semantics: Optional[Tensor] = None) -> Tensor:
        out = self.rdb3(self.rdb2(self.rdb1(x)))
        return out * self.residual_scale + x


class SemanticRRDB(RRDB):
    """RRDB 之后接一个 SeFB，把主干特征与低分辨率语义融合"""

    def __init__(self, num_feat: int, num_grow_ch: int, residual_scale: float,
                 semantic_channels: int, num_heads: int, groupnorm_groups: int):
        super().__init__(num_feat, num_grow_ch, residual_scale)
        self.sefb = SemanticFusionBlock(num_feat, semantic_channels, num_feat,
                                        num_heads=num_heads, groupnorm_groups=groupnorm_groups)

    def forward(self, x: Tensor, semantics: Optional[Tensor] = None) -> Tensor:
        if semantics is None:
            raise ContractError("Se-RRDB 块需要语义特征图")
        return self.sefb(super().forward(x), semantics)


class RRDBNet(nn.Module):
    """×4 RRDB 生成器

    浅层卷积 → N 个 RRDB → 主干卷积 + 全局残差 → 两级 ×2 上采样 → 输出卷积。
    训练时输出不截断，推理时由 infer 截断到 [0,1]。
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        nf, gc = spec.feature_channels, spec.growth_channels
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        blocks = []
        for index in range(1, spec.num_rrdb_blocks + 1):
            if index in spec.sefb_block_indices:
                blocks.append(SemanticRRDB(nf, gc, spec.residual_scale, spec.semantic_channels,
                                           spec.heads, spec.groupnorm_groups))
            else:
                blocks.append(RRDB(nf, gc, spec.residual_scale))
        self.body = nn.ModuleList(blocks)
        self.conv_body = nn.Conv2d(nf, nf, 3, 1, 1)

        if spec.upsampler == "nearest":
            self.conv_up1 = nn.Conv2d(nf, nf, 3, 1, 1)
            self.conv_up2 = nn.Conv2d(nf, nf, 3, 1, 1)
        else:
            self.conv_up1 = nn.Conv2d(nf, nf * 4, 3, 1, 1)
            self.conv_up2 = nn.Conv2d(nf, nf * 4, 3, 1, 1)
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2, inplace=True)

    @property
    def is_semantic(self) -> bool:
        return self.spec.is_semantic

    def _upsample(self, x: Tensor, conv: nn.Module) -> Tensor:
        if self.spec.upsampler == "nearest":
            return self.lrelu(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
        return self.lrelu(F.pixel_shuffle(conv(x), 2))

    def forward(self, lr: Tensor, semantics: Optional[Semantics] = None) -> Tensor:
        if lr.dim() != 4 or lr.shape[1] != 3:
            raise ContractError(f"生成器输入必须是 Bx3xHxW: {tuple(lr.shape)}")
        if isinstance(semantics, SemanticMap):
            semantics = semantics.data
        if self.is_semantic and semantics is None:
            raise ContractError("Se-RRDB 生成器需要语义特征图")

        feat = self.conv_first(lr)
        body = feat
        for block in self.body:
            body = block(body, semantics)
        feat = feat + self.conv_body(body)
        feat = self._upsample(feat, self.conv_up1)
        feat = self._upsample(feat, self.conv_up2)
        return self.conv_last(self.lrelu(self.conv_hr(feat)))


def build_generator(spec: Union[GeneratorSpec, ExperimentSettings]) -> RRDBNet:
    if isinstance(spec, ExperimentSettings):
        spec = GeneratorSpec.from_settings(spec)
    generator = RRDBNet(spec)
    logger.info(f"生成器 RRDB×{spec.num_rrdb_blocks} (SeFB 块: {list(spec.sefb_block_indices)}): "
                f"{count_parameters(generator)} 个参数")
    return generator


def count_parameters(spec: Union[GeneratorSpec, nn.Module]) -> int:
    """生成器参数量；给定规格时在 meta 设备上构建，不分配内存"""
    if isinstance(spec, nn.Module):
        return sum(p.numel() for p in spec.parameters())
    with torch.device("meta"):
        model = RRDBNet(spec)
    return sum(p.numel() for p in model.parameters())


def rrdb_forward(lr: Tensor, generator: RRDBNet) -> Tensor:
    """I_s = G(I_l)（训练输出，不截断）"""
    if generator.is_semantic:
        raise ConfigurationError("Se-RRDB 生成器请使用 se_rrdb_forward")
    return generator(lr)


def lr_semantics(lr: Tensor, extractor: SemanticExtractor) -> SemanticMap:
    """从低分辨率输入提取语义（先双线性放大到 32 的倍数）"""
    return extractor.extract(fit_to_multiple(lr.clamp(0.0, 1.0), INPUT_MULTIPLE, mode="resize"))


def se_rrdb_forward(lr: Tensor, generator: RRDBNet, extractor: SemanticExtractor) -> Tensor:
    if not generator.is_semantic:
        return generator(lr)
    return generator(lr, lr_semantics(lr, extractor))


def infer(generator: RRDBNet, lr: Tensor, extractor: Optional[SemanticExtractor] = None) -> Tensor:
    """推理：无梯度，输出截断到 [0,1]"""
    was_training = generator.training
    generator.eval()
    try:
        with torch.no_grad():
            if generator.is_semantic:
                if extractor is None:
                    raise ConfigurationError("Se-RRDB 推理需要语义提取器")
                out = se_rrdb_forward(lr, generator, extractor)
            else:
                out = generator(lr)
    finally:
        generator.train(was_training)
    return out.clamp(0.0, 1.0)


def with_indices(spec: GeneratorSpec, indices: Tuple[int, ...]) -> GeneratorSpec:
    return replace(spec, sefb_block_indices=tuple(indices))
