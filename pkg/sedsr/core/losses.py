"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

GAN 超分目标函数
像素损失 L_s、感知损失 L_p、对抗损失 L_adv / L_D，及 L_G = L_s + λ_p·L_p + λ_a·L_adv 的组合
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ConfigurationError, ContractError, NumericalError
from .semantic_extractor import IMAGENET_MEAN, IMAGENET_STD, SemanticExtractor
from .settings import ExperimentSettings, cache_dir

logger = logging.getLogger("sedsr.losses")

STANDARD_BCE = "standard_bce"
LITERAL_PAPER = "literal_paper"

# torchvision vgg19.features 中各卷积层（激活前）的下标
VGG_TAPS = {
    "conv1_2": 2,
    "conv2_2": 7,
    "conv3_4": 16,
    "conv4_4": 25,
    "conv5_4": 34,
}


@dataclass(frozen=True)
class LossWeights:
    lambda_pixel: float = 1.0
    lambda_perceptual: float = 1.0
    lambda_adversarial: float = 5e-3

    def __post_init__(self):
        if min(self.lambda_pixel, self.lambda_perceptual, self.lambda_adversarial) < 0:
            raise ConfigurationError(f"损失权重必须非负: {self}")

    @classmethod
    def from_settings(cls, settings: ExperimentSettings) -> "LossWeights":
        return cls(settings.loss.lambda_pixel, settings.loss.lambda_p, settings.loss.lambda_a)


@dataclass
class LossBreakdown:
    """各项未加权损失与加权总损失"""
    pixel: Tensor
    perceptual: Tensor
    adversarial: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "l_pixel": float(self.pixel.detach()),
            "l_perceptual": float(self.perceptual.detach()),
            "l_adv_g": float(self.adversarial.detach()),
            "l_g": float(self.total.detach()),
        }


class FeatureAdapter(Protocol):
    def features(self, image: Tensor) -> List[Tensor]:
        ...


class VGGFeatureAdapter(nn.Module):
    """冻结的 VGG19 特征节点（默认 conv5_4 激活前）"""

    def __init__(self, taps: Sequence[str] = ("conv5_4",), pretrained: bool = True):
        super().__init__()
        from torchvision import models

        unknown = [t for t in taps if t not in VGG_TAPS]
        if unknown:
            raise ConfigurationError(f"未知的 VGG 特征节点: {unknown}")
        weights = None
        if pretrained:
            torch.hub.set_dir(str(cache_dir()))
            weights = models.VGG19_Weights.IMAGENET1K_V1
        self.tap_indices = sorted(VGG_TAPS[t] for t in taps)
        self.features_net = models.vgg19(weights=weights).features[:self.tap_indices[-1] + 1]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.requires_grad_(False)
        self.eval()

    def features(self, image: Tensor) -> List[Tensor]:
        x = (image - self.mean) / self.std
        outputs = []
        for index, layer in enumerate(self.features_net):
            x = layer(x)
            if index in self.tap_indices:
                outputs.append(x)
        return outputs


class ExtractorFeatureAdapter:
    """以语义提取器的阶段输出作为感知特征（桌面规模/测试使用）"""

    def __init__(self, extractor: SemanticExtractor, stages: Sequence[int] = (1, 2)):
        if not stages or any(not 1 <= s <= 4 for s in stages):
            raise ConfigurationError(f"阶段编号必须在 1..4 之间: {stages}")
        self.extractor = extractor
        self.stages = tuple(sorted(stages))

    def features(self, image: Tensor) -> List[Tensor]:
        outputs = self.extractor.stage_outputs(image, depth=self.stages[-1])
        return [outputs[s - 1] for s in self.stages]


class IdentityAdapter:
    """单个恒等节点：感知损失退化为 L1 像素损失"""

    def features(self, image: Tensor) -> List[Tensor]:
        return [image]


def build_perceptual_adapter(settings: ExperimentSettings,
                             extractor: Optional[SemanticExtractor] = None) -> Optional[FeatureAdapter]:
    kind = settings.loss.perceptual
    if kind == "vgg":
        return VGGFeatureAdapter()
    if kind == "extractor":
        if extractor is None:
            raise ConfigurationError("loss.perceptual=extractor 需要语义提取器")
        return ExtractorFeatureAdapter(extractor)
    if settings.loss.lambda_p > 0:
        raise ConfigurationError("loss.perceptual=none 时 loss.lambda_p 必须为 0")
    return None


def _check_same_shape(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ContractError(f"形状不一致: {tuple(a.shape)} != {tuple(b.shape)}")


def _check_finite(name: str, *tensors: Optional[Tensor]):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise NumericalError(f"{name} 包含非有限值", {"tensor": name})


def pixel_loss(sr: Tensor, hr: Tensor, criterion: str = "l1") -> Tensor:
    """L_s：逐元素平均绝对误差（l2 时为均方误差）"""
    _check_same_shape(sr, hr)
    if criterion == "l1":
        return F.l1_loss(sr, hr)
    if criterion == "l2":
        return F.mse_loss(sr, hr)
    raise ConfigurationError(f"未知的像素损失: {criterion}")


def perceptual_loss(sr: Tensor, hr: Tensor, adapter: Optional[FeatureAdapter]) -> Tensor:
    """L_p：各特征节点上平均 L1 距离之和"""
    if adapter is None:
        raise ConfigurationError("感知损失未配置特征适配器")
    _check_same_shape(sr, hr)
    total = None
    for fs, fh in zip(adapter.features(sr), adapter.features(hr)):
        term = F.l1_loss(fs, fh)
        total = term if total is None else total + term
    if total is None:
        raise ConfigurationError("特征适配器没有返回任何特征")
    return total


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor, mode: str = STANDARD_BCE) -> Tensor:
    """L_D

    standard_bce: BCE(real→1) + BCE(fake→0)，按元素取均值
    literal_paper: E[log(1 - D(I_h))] + E[D(I_s)]，D = sigmoid(logits)
    """
    _check_finite("判别器 logits", real_logits, fake_logits)
    if mode == STANDARD_BCE:
        return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    if mode == LITERAL_PAPER:
        return F.logsigmoid(-real_logits).mean() + torch.sigmoid(fake_logits).mean()
    raise ConfigurationError(f"未知的 GAN 形式: {mode}")


def adversarial_loss_g(fake_logits: Tensor, mode: str = STANDARD_BCE,
                       real_logits: Optional[Tensor] = None) -> Tensor:
    """L_adv

    standard_bce: 非饱和形式 BCE(fake→1)
    literal_paper: E[log D(I_h)] + E[1 - D(I_s)]；未给 real_logits 时只保留第二项
    """
    _check_finite("判别器 logits", fake_logits, real_logits)
    if mode == STANDARD_BCE:
        return F.softplus(-fake_logits).mean()
    if mode == LITERAL_PAPER:
        loss = (1.0 - torch.sigmoid(fake_logits)).mean()
        if real_logits is not None:
            loss = F.logsigmoid(real_logits).mean() + loss
        return loss
    raise ConfigurationError(f"未知的 GAN 形式: {mode}")


def combine_losses(l_pixel: Tensor, l_perceptual: Tensor, l_adv: Tensor, weights: LossWeights) -> Tensor:
    return (weights.lambda_pixel * l_pixel
            + weights.lambda_perceptual * l_perceptual
            + weights.lambda_adversarial * l_adv)


def generator_total_loss(sr: Tensor, hr: Tensor, fake_logits: Optional[Tensor], weights: LossWeights,
                         adapter: Optional[FeatureAdapter] = None, pixel_criterion: str = "l1",
                         gan_mode: str = STANDARD_BCE, real_logits: Optional[Tensor] = None) -> LossBreakdown:
    """L_G = λ_pixel·L_s + λ_p·L_p + λ_a·L_adv，权重为 0 的项不计算"""
    zero = sr.new_zeros(())
    l_pixel = pixel_loss(sr, hr, pixel_criterion)
    total = weights.lambda_pixel * l_pixel

    l_perceptual = zero
    if weights.lambda_perceptual > 0:
        l_perceptual = perceptual_loss(sr, hr, adapter)
        total = total + weights.lambda_perceptual * l_perceptual

    l_adv = zero
    if weights.lambda_adversarial > 0:
        if fake_logits is None:
            raise ContractError("λ_a > 0 时需要判别器对 I_s 的 logits")
        l_adv = adversarial_loss_g(fake_logits, gan_mode, real_logits)
        total = total + weights.lambda_adversarial * l_adv

    return LossBreakdown(l_pixel, l_perceptual, l_adv, total)
