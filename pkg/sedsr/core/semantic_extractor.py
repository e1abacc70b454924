"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

语义提取器
包装冻结的预训练视觉骨干网络（RN50 阶段结构），在指定深度输出逐像素语义特征图；
并提供确定性的玩具提取器用于桌面规模测试
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ConfigurationError, ContractError, NumericalError, ShapeError
from .settings import ExperimentSettings, cache_dir

logger = logging.getLogger("sedsr.extractor")

# RN50 四个阶段的通道宽度与相对输入的下采样倍数
STAGE_CHANNELS = (256, 512, 1024, 2048)
STAGE_STRIDES = (4, 8, 16, 32)
INPUT_MULTIPLE = 32

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneKind(Enum):
    """骨干网络类型"""
    VISION_LANGUAGE_RN50 = "clip_rn50"     # 视觉-语言预训练 RN50
    CLASSIFICATION_RN50 = "resnet50"       # ImageNet 分类预训练 ResNet-50
    TOY = "toy"                            # 随机种子初始化的小型卷积栈


NORMALIZATION = {
    BackboneKind.VISION_LANGUAGE_RN50: (CLIP_MEAN, CLIP_STD),
    BackboneKind.CLASSIFICATION_RN50: (IMAGENET_MEAN, IMAGENET_STD),
    BackboneKind.TOY: ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
}


@dataclass(frozen=True)
class ExtractorSpec:
    backbone_kind: BackboneKind = BackboneKind.VISION_LANGUAGE_RN50
    layer_index: int = 3
    mean: Tuple[float, float, float] = CLIP_MEAN
    std: Tuple[float, float, float] = CLIP_STD
    frozen: bool = True

    def __post_init__(self):
        if not isinstance(self.layer_index, int) or not 1 <= self.layer_index <= 4:
            raise ConfigurationError(f"layer_index 必须在 1..4 之间: {self.layer_index}")
        if self.frozen is not True:
            raise ConfigurationError("语义提取器必须冻结")
        if any(s <= 0 for s in self.std):
            raise ConfigurationError("归一化标准差必须为正")

    @classmethod
    def for_kind(cls, kind: Union[str, BackboneKind], layer_index: int = 3) -> "ExtractorSpec":
        kind = BackboneKind(kind)
        mean, std = NORMALIZATION[kind]
        return cls(backbone_kind=kind, layer_index=layer_index, mean=mean, std=std)

    @property
    def channels(self) -> int:
        return STAGE_CHANNELS[self.layer_index - 1]

    @property
    def stride(self) -> int:
        return STAGE_STRIDES[self.layer_index - 1]

    @property
    def source_id(self) -> str:
        return f"{self.backbone_kind.value}/layer{self.layer_index}"


@dataclass
class SemanticMap:
    """φ(I_h)：B×C_s×H_s×W_s 语义特征图"""
    data: Tensor
    layer_index: int
    source_id: str

    def __post_init__(self):
        if self.data.dim() != 4:
            raise ContractError(f"语义特征图必须是 4 维张量: {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise NumericalError("语义特征图包含非有限值", {"source_id": self.source_id})

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


# ----------------------------------------------------------------------------
# 骨干网络
# ----------------------------------------------------------------------------

class ClipBottleneck(nn.Module):
    """视觉-语言 RN50 的抗混叠瓶颈块（stride>1 时先平均池化再 1x1 卷积）"""
    expansion = 4

    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu2 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu3 = nn.ReLU(inplace=True)

        self.downsample = None
        if stride > 1 or inplanes != planes * self.expansion:
            self.downsample = nn.Sequential(OrderedDict([
                ("-1", nn.AvgPool2d(stride)),
                ("0", nn.Conv2d(inplanes, planes * self.expansion, 1, stride=1, bias=False)),
                ("1", nn.BatchNorm2d(planes * self.expansion)),
            ]))

    def forward(self, x: Tensor) -> Tensor:
        identity = x
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        out = self.avgpool(out)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            identity = self.downsample(x)
        return self.relu3(out + identity)


class ClipRN50Stem(nn.Module):
    """三层卷积 stem + 平均池化，总步长 4"""

    def __init__(self, width: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width // 2, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width // 2)
        self.relu1 = nn.ReLU(inplace=True)
        self.conv2 = nn.Conv2d(width // 2, width // 2, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width // 2)
        self.relu2 = nn.ReLU(inplace=True)
        self.conv3 = nn.Conv2d(width // 2, width, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(width)
        self.relu3 = nn.ReLU(inplace=True)
        self.avgpool = nn.AvgPool2d(2)

    def forward(self, x: Tensor) -> Tensor:
        x = self.relu1(self.bn1(self.conv1(x)))
        x = self.relu2(self.bn2(self.conv2(x)))
        x = self.relu3(self.bn3(self.conv3(x)))
        return self.avgpool(x)


def clip_rn50_stages(layers: Sequence[int] = (3, 4, 6, 3), width: int = 64) -> Tuple[nn.Module, List[nn.Module]]:
    """构建视觉-语言 RN50 的 stem 与四个阶段（不含注意力池化头）"""
    stem = ClipRN50Stem(width)
    stages = []
    inplanes = width
    for i, blocks in enumerate(layers):
        planes = width * 2 ** i
        stride = 1 if i == 0 else 2
        modules = [ClipBottleneck(inplanes, planes, stride)]
        inplanes = planes * ClipBottleneck.expansion
        modules += [ClipBottleneck(inplanes, planes) for _ in range(1, blocks)]
        stages.append(nn.Sequential(*modules))
    return stem, stages


def resnet50_stages(pretrained: bool = False) -> Tuple[nn.Module, List[nn.Module]]:
    """torchvision ResNet-50 的 stem（conv/bn/relu/maxpool）与四个阶段"""
    from torchvision import models

    weights = None
    if pretrained:
        torch.hub.set_dir(str(cache_dir()))
        weights = models.ResNet50_Weights.IMAGENET1K_V2
    model = models.resnet50(weights=weights)
    stem = nn.Sequential(model.conv1, model.bn1, model.relu, model.maxpool)
    return stem, [model.layer1, model.layer2, model.layer3, model.layer4]


def toy_stages() -> Tuple[nn.Module, List[nn.Module]]:
    """与 RN50 步长/通道计划一致的小型卷积栈"""
    stem = nn.Sequential(nn.Conv2d(3, 64, 4, stride=4), nn.ReLU())
    stages = [
        nn.Sequential(nn.Conv2d(64, 256, 1), nn.ReLU()),
        nn.Sequential(nn.Conv2d(256, 512, 2, stride=2, groups=4), nn.ReLU()),
        nn.Sequential(nn.Conv2d(512, 1024, 2, stride=2, groups=8), nn.ReLU()),
        nn.Sequential(nn.Conv2d(1024, 2048, 2, stride=2, groups=16), nn.ReLU()),
    ]
    return stem, stages


# ----------------------------------------------------------------------------
# 权重提供者
# ----------------------------------------------------------------------------

class WeightProvider(Protocol):
    def load(self, spec: ExtractorSpec) -> Dict[str, Tensor]:
        ...


class FileWeightProvider:
    """从检查点文件读取骨干权重

    相对路径先按当前目录解析，不存在时再到缓存目录（SED_SR_CACHE）中查找。
    视觉-语言检查点只保留 ``visual.`` 前缀下的参数。
    """

    def __init__(self, weights_path: Union[str, Path]):
        if not weights_path:
            raise ConfigurationError("未配置 extractor.weights_path")
        self._path = Path(weights_path).expanduser()

    def resolve(self) -> Path:
        if self._path.is_file():
            return self._path
        cached = cache_dir() / self._path
        if cached.is_file():
            return cached
        raise ConfigurationError(f"找不到语义提取器权重: {self._path}")

    def load(self, spec: ExtractorSpec) -> Dict[str, Tensor]:
        path = self.resolve()
        logger.info(f"加载语义提取器权重: {path}")
        try:
            state = torch.load(str(path), map_location="cpu", weights_only=True)
        except (RuntimeError, ValueError, TypeError, AttributeError):
            # 官方视觉-语言检查点为 TorchScript 存档
            state = torch.jit.load(str(path), map_location="cpu").state_dict()
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if spec.backbone_kind is BackboneKind.VISION_LANGUAGE_RN50 and any(k.startswith("visual.") for k in state):
            state = {k[len("visual."):]: v for k, v in state.items() if k.startswith("visual.")}
        return state


# ----------------------------------------------------------------------------
# 提取器
# ----------------------------------------------------------------------------

class SemanticExtractor(nn.Module):
    """冻结的语义提取器 φ

    参数在构造时冻结，且模块始终处于 eval 模式（BatchNorm 使用统计量）。
    """

    def __init__(self, spec: ExtractorSpec, stem: nn.Module, stages: Sequence[nn.Module]):
        super().__init__()
        if len(stages) != 4:
            raise ContractError("骨干网络必须提供四个阶段")
        self.spec = spec
        self.stem = stem
        self.layer1, self.layer2, self.layer3, self.layer4 = stages
        self.register_buffer("mean", torch.tensor(spec.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(spec.std).view(1, 3, 1, 1), persistent=False)
        self.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True) -> "SemanticExtractor":
        return super().train(False)

    def load_backbone_state(self, state: Dict[str, Tensor]):
        """加载骨干权重，忽略检查点中多余的头部参数"""
        own = self.state_dict()
        remapped = {}
        for key, value in state.items():
            if key in own:
                remapped[key] = value
            elif key.startswith(("conv1.", "bn1.", "conv2.", "bn2.", "conv3.", "bn3.")) and f"stem.{key}" in own:
                remapped[f"stem.{key}"] = value
        missing = sorted(set(own) - set(remapped))
        if missing:
            raise ConfigurationError(f"语义提取器权重缺少参数: {missing[:5]} ...")
        self.load_state_dict(remapped)
        self.requires_grad_(False)

    @property
    def stages(self) -> List[nn.Module]:
        return [self.layer1, self.layer2, self.layer3, self.layer4]

    def stage_outputs(self, image: Tensor, depth: Optional[int] = None) -> List[Tensor]:
        """逐阶段前向（参数冻结，但允许梯度流向输入，供感知损失使用）"""
        depth = depth or self.spec.layer_index
        x = preprocess_for_pvm(image, self.spec)
        x = self.stem(x)
        outputs = []
        for stage in self.stages[:depth]:
            x = stage(x)
            outputs.append(x)
        return outputs

    def forward(self, image: Tensor) -> Tensor:
        _check_input(image)
        with torch.no_grad():
            return self.stage_outputs(image)[-1].detach()

    def extract(self, image: Tensor) -> SemanticMap:
        return SemanticMap(self(image), self.spec.layer_index, self.spec.source_id)

    def extract_all(self, image: Tensor) -> List[SemanticMap]:
        """返回四个阶段的语义特征图（层选择消融使用）"""
        _check_input(image)
        with torch.no_grad():
            maps = self.stage_outputs(image, depth=4)
        return [SemanticMap(m.detach(), i + 1, f"{self.spec.backbone_kind.value}/layer{i + 1}")
                for i, m in enumerate(maps)]


def _check_input(image: Tensor):
    if image.dim() != 4 or image.shape[1] != 3:
        raise ContractError(f"输入必须是 Bx3xHxW 张量: {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ShapeError(f"语义提取输入尺寸必须是 {INPUT_MULTIPLE} 的倍数: {h}x{w}")
    if image.numel() and (image.min() < -1e-6 or image.max() > 1 + 1e-6):
        raise ContractError("语义提取输入取值必须在 [0,1] 之间")


def preprocess_for_pvm(image: Tensor, spec: ExtractorSpec) -> Tensor:
    """按骨干网络预训练时的均值/方差逐通道归一化"""
    mean = torch.tensor(spec.mean, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
    std = torch.tensor(spec.std, dtype=image.dtype, device=image.device).view(1, 3, 1, 1)
    return (image - mean) / std


def make_toy_extractor(seed: int, layer_index: int = 3) -> Tuple[ExtractorSpec, Dict[str, Tensor]]:
    """生成玩具提取器的规格与权重

    权重按参数名顺序从种子生成器抽取（Kaiming 正态），偏置为零。
    """
    spec = ExtractorSpec.for_kind(BackboneKind.TOY, layer_index)
    stem, stages = toy_stages()
    template = SemanticExtractor(spec, stem, stages)
    generator = torch.Generator().manual_seed(int(seed))
    weights = {}
    for name, param in sorted(template.named_parameters()):
        if name.endswith("bias"):
            weights[name] = torch.zeros_like(param)
        else:
            fan_in = param[0].numel()
            weights[name] = torch.randn(param.shape, generator=generator) * (2.0 / fan_in) ** 0.5
    return spec, weights


def build_extractor(spec: ExtractorSpec,
                    weights: Optional[Dict[str, Tensor]] = None,
                    provider: Optional[WeightProvider] = None,
                    pretrained: bool = True) -> SemanticExtractor:
    """按规格构建冻结的语义提取器

    Args:
        spec: 提取器规格
        weights: 直接给定的权重（玩具提取器使用）
        provider: 权重提供者（预训练骨干使用）
        pretrained: 为 False 时保留随机初始化（仅用于形状检查）
    """
    if spec.backbone_kind is BackboneKind.TOY:
        stem, stages = toy_stages()
    elif spec.backbone_kind is BackboneKind.VISION_LANGUAGE_RN50:
        stem, stages = clip_rn50_stages()
    else:
        stem, stages = resnet50_stages(pretrained=pretrained and provider is None and weights is None)

    extractor = SemanticExtractor(spec, stem, stages)
    if weights is None and provider is not None:
        weights = provider.load(spec)
    if weights is not None:
        extractor.load_backbone_state(weights)
    elif spec.backbone_kind is BackboneKind.VISION_LANGUAGE_RN50 and pretrained:
        raise ConfigurationError("视觉-语言 RN50 需要 extractor.weights_path")
    elif spec.backbone_kind is BackboneKind.TOY:
        raise ConfigurationError("玩具提取器需要由 make_toy_extractor 生成的权重")
    logger.info(f"语义提取器就绪: {spec.source_id}, 输出通道 {spec.channels}")
    return extractor


def extractor_from_settings(settings: ExperimentSettings) -> SemanticExtractor:
    """根据实验配置构建语义提取器"""
    cfg = settings.extractor
    if cfg.kind == BackboneKind.TOY.value:
        spec, weights = make_toy_extractor(settings.extractor_seed(), cfg.layer)
        return build_extractor(spec, weights)
    spec = ExtractorSpec.for_kind(cfg.kind, cfg.layer)
    provider = FileWeightProvider(cfg.weights_path) if cfg.weights_path else None
    return build_extractor(spec, provider=provider)


def extract_semantics(image: Tensor, spec: ExtractorSpec, extractor: SemanticExtractor) -> SemanticMap:
    """φ(image)：在 spec.layer_index 深度提取语义特征图

    输出是 (image, spec, 权重) 的纯函数，且不向提取器参数传播梯度。
    """
    if extractor.spec.backbone_kind is not spec.backbone_kind:
        raise ConfigurationError(f"提取器类型不匹配: {extractor.spec.backbone_kind} != {spec.backbone_kind}")
    _check_input(image)
    with torch.no_grad():
        data = extractor.stage_outputs(image, depth=spec.layer_index)[-1].detach()
    return SemanticMap(data, spec.layer_index, spec.source_id)


def fit_to_multiple(image: Tensor, multiple: int = INPUT_MULTIPLE, mode: str = "crop") -> Tensor:
    """将 BxCxHxW 图像调整到 multiple 的倍数

    crop: 中心裁剪到不大于原尺寸的最近倍数
    resize: 双线性缩放到不小于原尺寸的最近倍数（保持空间对应关系）
    """
    h, w = image.shape[-2:]
    if mode == "crop":
        th, tw = h - h % multiple, w - w % multiple
        if th == 0 or tw == 0:
            raise ShapeError(f"图像尺寸 {h}x{w} 小于 {multiple}")
        top, left = (h - th) // 2, (w - tw) // 2
        return image[..., top:top + th, left:left + tw]
    if mode == "resize":
        th, tw = -(-h // multiple) * multiple, -(-w // multiple) * multiple
        if (th, tw) == (h, w):
            return image
        return F.interpolate(image, size=(th, tw), mode="bilinear", align_corners=False).clamp(0.0, 1.0)
    raise ConfigurationError(f"未知的尺寸调整方式: {mode}")


def semantic_energy(semantics: Union[SemanticMap, Tensor]) -> Tensor:
    """逐像素通道 L2 能量，按图像归一化到 [0,1]（越亮表示对预训练模型越显著）"""
    data = semantics.data if isinstance(semantics, SemanticMap) else semantics
    energy = data.float().pow(2).sum(dim=1).sqrt()
    flat = energy.flatten(1)
    low = flat.min(dim=1, keepdim=True).values
    high = flat.max(dim=1, keepdim=True).values
    return ((flat - low) / (high - low).clamp_min(1e-12)).view_as(energy)
