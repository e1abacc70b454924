"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

判别器
三种粒度（patch / pixel / image）的语义条件判别器及对应的无条件基线。
所有判别器输出未经 sigmoid 的原始 logits
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils import spectral_norm as _spectral_norm

from .exceptions import ConfigurationError, ContractError, ShapeError
from .sefb import Semantics, build_fusion_block
from .semantic_extractor import STAGE_CHANNELS, SemanticMap
from .settings import ExperimentSettings

logger = logging.getLogger("sedsr.discriminator")

LEAKY_SLOPE = 0.2


class Granularity(Enum):
    PATCH = "patch"   # B×1×H/8×W/8
    PIXEL = "pixel"   # B×1×H×W
    IMAGE = "image"   # B×1


@dataclass
class DiscriminatorOutput:
    logits: Tensor
    granularity: Granularity


@dataclass(frozen=True)
class DiscriminatorSpec:
    family: str = "patch_sed"
    base_channels: int = 64
    spectral_norm: bool = True
    sefb_stages: int = 2
    image_size: int = 256
    semantic_channels: int = 1024
    fusion_mode: str = "sefb"
    embed_dim: Optional[int] = None
    heads: int = 4
    groupnorm_groups: int = 8

    @classmethod
    def from_settings(cls, settings: ExperimentSettings) -> "DiscriminatorSpec":
        return cls(
            family=settings.disc.family,
            base_channels=settings.disc.base_channels,
            spectral_norm=settings.disc.spectral_norm,
            sefb_stages=settings.disc.sefb_stages,
            image_size=settings.disc.image_size,
            semantic_channels=STAGE_CHANNELS[settings.extractor.layer - 1],
            fusion_mode=settings.sefb.fusion_mode,
            embed_dim=settings.sefb.embed_dim or None,
            heads=settings.sefb.heads,
            groupnorm_groups=settings.sefb.groupnorm_groups,
        )

    @property
    def is_semantic(self) -> bool:
        return self.family.endswith("_sed")

    @property
    def backbone(self) -> str:
        return self.family.split("_")[0]


class PlainBlock(nn.Module):
    """SeFB 的无条件替代块：Conv3x3 (+BN) + LeakyReLU，通道宽度一致"""

    def __init__(self, in_channels: int, out_channels: int, norm: bool = True, sn: bool = False):
        super().__init__()
        conv = nn.Conv2d(in_channels, out_channels, 3, 1, 1, bias=not norm)
        self.conv = _spectral_norm(conv) if sn else conv
        self.bn = nn.BatchNorm2d(out_channels) if norm else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(x)), LEAKY_SLOPE)


class SemanticStage(nn.Module):
    """包装一个融合块或一个普通块，统一 forward(x, semantics) 接口"""

    def __init__(self, block: nn.Module, semantic: bool):
        super().__init__()
        self.block = block
        self.semantic = semantic

    def forward(self, x: Tensor, semantics: Optional[Semantics]) -> Tensor:
        if self.semantic:
            return F.leaky_relu(self.block(x, semantics), LEAKY_SLOPE)
        return self.block(x)


class BaseDiscriminator(nn.Module):
    granularity: Granularity

    def __init__(self, spec: DiscriminatorSpec, record_query: bool = False):
        super().__init__()
        self.spec = spec
        self.record_query = record_query

    @property
    def is_semantic(self) -> bool:
        return self.spec.is_semantic

    def _stage(self, channels: int, semantic: bool, plain_norm: bool = True, sn: bool = False) -> SemanticStage:
        if semantic:
            block = build_fusion_block(
                self.spec.fusion_mode, channels, self.spec.semantic_channels, channels,
                embed_dim=self.spec.embed_dim, num_heads=self.spec.heads,
                groupnorm_groups=self.spec.groupnorm_groups, record_query=self.record_query)
            return SemanticStage(block, True)
        return SemanticStage(PlainBlock(channels, channels, norm=plain_norm, sn=sn), False)

    def stages(self) -> List[SemanticStage]:
        return [m for m in self.modules() if isinstance(m, SemanticStage)]

    def fusion_blocks(self) -> List[nn.Module]:
        return [s.block for s in self.stages() if s.semantic]

    def taps(self) -> Dict[str, nn.Module]:
        """特征导出可用的命名位置

        block1: 第一个条件/替代块的输出（所有家族）
        sefb1: 第一个 SeFB 的输出（语义家族）
        bn1: 第一个替代块中 BN 层的输出（带 BN 的无条件家族）
        """
        stages = self.stages()
        taps: Dict[str, nn.Module] = {"block1": stages[0]}
        fusion = self.fusion_blocks()
        if fusion:
            taps["sefb1"] = fusion[0]
        for stage in stages:
            if not stage.semantic and isinstance(stage.block.bn, nn.BatchNorm2d):
                taps["bn1"] = stage.block.bn
                break
        return taps

    def _check_semantics(self, semantics: Optional[Semantics]):
        if self.is_semantic and semantics is None:
            raise ContractError(f"{self.spec.family} 需要语义特征图 S_h")
        if not self.is_semantic and semantics is not None:
            raise ContractError(f"{self.spec.family} 不接受语义特征图")
        if isinstance(semantics, SemanticMap):
            return semantics.data
        return semantics

    def forward(self, image: Tensor, semantics: Optional[Semantics] = None) -> DiscriminatorOutput:
        semantics = self._check_semantics(semantics)
        if image.dim() != 4 or image.shape[1] != 3:
            raise ContractError(f"判别器输入必须是 Bx3xHxW: {tuple(image.shape)}")
        return DiscriminatorOutput(self.logits(image, semantics), self.granularity)

    def logits(self, image: Tensor, semantics: Optional[Tensor]) -> Tensor:
        raise NotImplementedError


class PatchDiscriminator(BaseDiscriminator):
    """PatchGAN 式判别器：stem → [块] → s2 → [块] → s2 → [块] → s2 → 1x1，输出 H/8×W/8"""

    granularity = Granularity.PATCH

    def __init__(self, spec: DiscriminatorSpec, record_query: bool = False):
        super().__init__(spec, record_query)
        nf = spec.base_channels
        semantic = spec.is_semantic
        self.stem = nn.Conv2d(3, nf, 3, 1, 1)
        self.block1 = self._stage(nf, semantic)
        self.down1 = nn.Conv2d(nf, nf * 2, 4, 2, 1)
        self.block2 = self._stage(nf * 2, semantic)
        self.down2 = nn.Conv2d(nf * 2, nf * 4, 4, 2, 1)
        self.block3 = self._stage(nf * 4, semantic)
        self.down3 = nn.Conv2d(nf * 4, nf * 4, 4, 2, 1)
        self.head = nn.Conv2d(nf * 4, 1, 1)

    def logits(self, image: Tensor, semantics: Optional[Tensor]) -> Tensor:
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"PatchGAN 判别器输入尺寸必须是 8 的倍数: {h}x{w}")
        x = F.leaky_relu(self.stem(image), LEAKY_SLOPE)
        x = self.block1(x, semantics)
        x = F.leaky_relu(self.down1(x), LEAKY_SLOPE)
        x = self.block2(x, semantics)
        x = F.leaky_relu(self.down2(x), LEAKY_SLOPE)
        x = self.block3(x, semantics)
        x = F.leaky_relu(self.down3(x), LEAKY_SLOPE)
        return self.head(x)


class UNetDiscriminator(BaseDiscriminator):
    """带谱归一化的 U-Net 判别器，浅层（前 sefb_stages 个编码阶段）替换为 SeFB，输出逐像素 logits"""

    granularity = Granularity.PIXEL

    def __init__(self, spec: DiscriminatorSpec, record_query: bool = False):
        super().__init__(spec, record_query)
        nf = spec.base_channels
        sn = _spectral_norm if spec.spectral_norm else (lambda m: m)
        n_semantic = spec.sefb_stages if spec.is_semantic else 0

        self.conv0 = nn.Conv2d(3, nf, 3, 1, 1)
        self.block0 = self._stage(nf, n_semantic >= 1, plain_norm=False, sn=spec.spectral_norm)
        self.conv1 = sn(nn.Conv2d(nf, nf * 2, 4, 2, 1, bias=False))
        self.block1 = self._stage(nf * 2, n_semantic >= 2, plain_norm=False, sn=spec.spectral_norm)
        self.conv2 = sn(nn.Conv2d(nf * 2, nf * 4, 4, 2, 1, bias=False))
        self.conv3 = sn(nn.Conv2d(nf * 4, nf * 8, 4, 2, 1, bias=False))

        self.conv4 = sn(nn.Conv2d(nf * 8, nf * 4, 3, 1, 1, bias=False))
        self.conv5 = sn(nn.Conv2d(nf * 4, nf * 2, 3, 1, 1, bias=False))
        self.conv6 = sn(nn.Conv2d(nf * 2, nf, 3, 1, 1, bias=False))

        self.conv7 = sn(nn.Conv2d(nf, nf, 3, 1, 1, bias=False))
        self.conv8 = sn(nn.Conv2d(nf, nf, 3, 1, 1, bias=False))
        self.conv9 = nn.Conv2d(nf, 1, 3, 1, 1)

    def logits(self, image: Tensor, semantics: Optional[Tensor]) -> Tensor:
        h, w = image.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"U-Net 判别器输入尺寸必须是 16 的倍数: {h}x{w}")
        act = lambda t: F.leaky_relu(t, LEAKY_SLOPE)

        # 编码
        x0 = self.block0(act(self.conv0(image)), semantics)
        x1 = self.block1(act(self.conv1(x0)), semantics)
        x2 = act(self.conv2(x1))
        x3 = act(self.conv3(x2))

        # 解码
        x3 = F.interpolate(x3, scale_factor=2, mode="bilinear", align_corners=False)
        x4 = act(self.conv4(x3)) + x2
        x4 = F.interpolate(x4, scale_factor=2, mode="bilinear", align_corners=False)
        x5 = act(self.conv5(x4)) + x1
        x5 = F.interpolate(x5, scale_factor=2, mode="bilinear", align_corners=False)
        x6 = act(self.conv6(x5)) + x0

        out = act(self.conv7(x6))
        out = act(self.conv8(out))
        return self.conv9(out)


class VGGDiscriminator(BaseDiscriminator):
    """VGG 式判别器：五个下采样阶段，前两个阶段后插入 SeFB，全局池化 + 两层全连接输出单个 logit"""

    granularity = Granularity.IMAGE

    def __init__(self, spec: DiscriminatorSpec, record_query: bool = False):
        super().__init__(spec, record_query)
        nf = spec.base_channels
        widths = [nf, nf * 2, nf * 4, nf * 8, nf * 8]
        self.features = nn.ModuleList()
        in_ch = 3
        for i, ch in enumerate(widths):
            self.features.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, 3, 1, 1, bias=i == 0),
                *([] if i == 0 else [nn.BatchNorm2d(ch)]),
                nn.LeakyReLU(LEAKY_SLOPE),
                nn.Conv2d(ch, ch, 4, 2, 1, bias=False),
                nn.BatchNorm2d(ch),
                nn.LeakyReLU(LEAKY_SLOPE),
            ))
            in_ch = ch
        self.block1 = self._stage(widths[0], spec.is_semantic)
        self.block2 = self._stage(widths[1], spec.is_semantic)
        self.linear1 = nn.Linear(widths[-1], 100)
        self.linear2 = nn.Linear(100, 1)

    def logits(self, image: Tensor, semantics: Optional[Tensor]) -> Tensor:
        size = self.spec.image_size
        if tuple(image.shape[-2:]) != (size, size):
            raise ShapeError(f"VGG 判别器输入必须是 {size}x{size}: {tuple(image.shape[-2:])}")
        x = image
        for i, stage in enumerate(self.features):
            x = stage(x)
            if i == 0:
                x = self.block1(x, semantics)
            elif i == 1:
                x = self.block2(x, semantics)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.linear2(F.leaky_relu(self.linear1(x), LEAKY_SLOPE))


DISCRIMINATOR_TYPES = {
    "patch": PatchDiscriminator,
    "unet": UNetDiscriminator,
    "vgg": VGGDiscriminator,
}


def build_discriminator(spec: Union[DiscriminatorSpec, ExperimentSettings],
                        record_query: bool = False) -> BaseDiscriminator:
    """按家族构建判别器"""
    if isinstance(spec, ExperimentSettings):
        spec = DiscriminatorSpec.from_settings(spec)
    cls = DISCRIMINATOR_TYPES.get(spec.backbone)
    if cls is None or spec.family.split("_")[-1] not in ("sed", "vanilla"):
        raise ConfigurationError(f"未知的判别器家族: {spec.family}")
    disc = cls(spec, record_query=record_query)
    logger.info(f"判别器 {spec.family}: {count_parameters(disc)} 个参数")
    return disc


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _require(disc: BaseDiscriminator, backbone: str, semantic: bool):
    if disc.spec.backbone != backbone or disc.is_semantic != semantic:
        raise ConfigurationError(f"判别器家族不匹配: {disc.spec.family}")


def patch_sed_forward(image: Tensor, semantics: Semantics, disc: BaseDiscriminator) -> DiscriminatorOutput:
    _require(disc, "patch", True)
    return disc(image, semantics)


def unet_sed_forward(image: Tensor, semantics: Semantics, disc: BaseDiscriminator) -> DiscriminatorOutput:
    _require(disc, "unet", True)
    return disc(image, semantics)


def vgg_sed_forward(image: Tensor, semantics: Semantics, disc: BaseDiscriminator) -> DiscriminatorOutput:
    _require(disc, "vgg", True)
    return disc(image, semantics)


def vanilla_forward(image: Tensor, disc: BaseDiscriminator) -> DiscriminatorOutput:
    if disc.is_semantic:
        raise ConfigurationError(f"需要无条件判别器: {disc.spec.family}")
    return disc(image)


def discriminate(disc: BaseDiscriminator, image: Tensor, semantics: Optional[Semantics]) -> Tensor:
    """训练循环使用：语义家族传入 S_h，无条件家族忽略它，返回 logits"""
    return disc(image, semantics if disc.is_semantic else None).logits


def spectral_norm_modules(disc: nn.Module) -> List[nn.Module]:
    """返回挂有谱归一化的卷积层"""
    return [m for m in disc.modules() if hasattr(m, "weight_orig")]


def top_singular_value(module: nn.Module) -> float:
    weight = module.weight.detach()
    return torch.linalg.matrix_norm(weight.reshape(weight.shape[0], -1), ord=2).item()
