"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

定量评估
PSNR / SSIM（Y 通道、裁边 4 像素）原生实现，LPIPS / NIQE 通过适配器接入，
以及判别器中间特征导出
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .base_module import BaseModule
from .checkpoints import checkpoint_settings, load_generator, read_generator_checkpoint
from .data import SamplePair
from .discriminators import BaseDiscriminator
from .events import EventType
from .exceptions import ConfigurationError, ContractError, ShapeError
from .generators import RRDBNet, infer
from .image_processor import ImageProcessor
from .semantic_extractor import SemanticExtractor, extractor_from_settings

logger = logging.getLogger("sedsr.evaluation")

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
UNAVAILABLE = "unavailable"
METRICS = ("psnr", "ssim", "lpips", "niqe")
NO_REFERENCE_METRICS = ("niqe", "brisque", "piqe", "musiq")

ImageLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class MetricConvention:
    color: str = "y"        # y: ITU-R BT.601 亮度；rgb: 三通道
    crop_border: int = 4

    def __post_init__(self):
        if self.color not in ("y", "rgb"):
            raise ConfigurationError(f"未知的颜色约定: {self.color}")
        if self.crop_border < 0:
            raise ConfigurationError("crop_border 不能为负")


def _as_batch(image: ImageLike) -> np.ndarray:
    """Tensor / ndarray（[B,]C×H×W）-> float64 B×C×H×W"""
    if isinstance(image, Tensor):
        data = image.detach().cpu().double().numpy()
    elif isinstance(image, np.ndarray):
        data = image.astype(np.float64)
    else:
        raise TypeError(f"指标输入必须是 Tensor 或 ndarray: {type(image).__name__}")
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ContractError(f"指标输入必须是 [B,]C×H×W: {data.shape}")
    return data


def _prepare(a: ImageLike, b: ImageLike, convention: MetricConvention):
    x, y = _as_batch(a), _as_batch(b)
    if x.shape != y.shape:
        raise ContractError(f"形状不一致: {x.shape} != {y.shape}")
    if convention.color == "y" and x.shape[1] == 3:
        x = ImageProcessor.rgb_to_y(x)[:, None]
        y = ImageProcessor.rgb_to_y(y)[:, None]
    c = convention.crop_border
    if c:
        x, y = x[..., c:-c, c:-c], y[..., c:-c, c:-c]
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ShapeError(f"裁边 {c} 后图像为空")
    return x, y


def psnr(a: ImageLike, b: ImageLike, convention: MetricConvention = MetricConvention()) -> np.ndarray:
    """逐图像 PSNR（dB，峰值 1），完全相同时截断为 100 dB"""
    x, y = _prepare(a, b, convention)
    mse = ((x - y) ** 2).reshape(x.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(1.0 / mse)
    return np.minimum(values, PSNR_CAP)


def _gaussian_window() -> np.ndarray:
    g = cv2.getGaussianKernel(SSIM_WINDOW, SSIM_SIGMA).astype(np.float64)
    return g @ g.T


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    window = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    half = SSIM_WINDOW // 2
    valid = (slice(half, -half), slice(half, -half))

    def filt(img):
        return cv2.filter2D(img, -1, window, borderType=cv2.BORDER_REFLECT)[valid]

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x ** 2
    sigma_y = filt(y * y) - mu_y ** 2
    sigma_xy = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / \
               ((mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2))
    return float(ssim_map.mean())


def ssim(a: ImageLike, b: ImageLike, convention: MetricConvention = MetricConvention()) -> np.ndarray:
    """逐图像 SSIM：11×11 高斯窗（σ=1.5），K1=0.01，K2=0.03，动态范围 1，仅统计有效区域"""
    x, y = _prepare(a, b, convention)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM 需要不小于 {SSIM_WINDOW}x{SSIM_WINDOW} 的图像: {x.shape[-2:]}")
    values = []
    for xi, yi in zip(x, y):
        values.append(np.mean([_ssim_channel(np.ascontiguousarray(xc), np.ascontiguousarray(yc))
                               for xc, yc in zip(xi, yi)]))
    return np.asarray(values, dtype=np.float64)


# ----------------------------------------------------------------------------
# 外部指标适配器
# ----------------------------------------------------------------------------

class MetricAdapter:
    name: str = ""
    no_reference: bool = False

    def __call__(self, sr: Tensor, hr: Optional[Tensor] = None) -> float:
        raise NotImplementedError


class CallableAdapter(MetricAdapter):
    """把任意函数包装为指标适配器"""

    def __init__(self, name: str, fn: Callable[..., Any], no_reference: bool = False):
        self.name = name
        self.fn = fn
        self.no_reference = no_reference

    def __call__(self, sr: Tensor, hr: Optional[Tensor] = None) -> float:
        value = self.fn(sr) if self.no_reference else self.fn(sr, hr)
        return float(value)


class PyiqaAdapter(MetricAdapter):
    """通过 pyiqa 计算 LPIPS / NIQE 等指标（首次调用时加载模型）"""

    def __init__(self, name: str, device: str = "cpu"):
        self.name = name
        self.device = device
        self.no_reference = name in NO_REFERENCE_METRICS
        self._metric = None

    @staticmethod
    def available() -> bool:
        try:
            import pyiqa  # noqa: F401
        except ImportError:
            return False
        return True

    def _load(self):
        if self._metric is None:
            try:
                import pyiqa
            except ImportError as e:
                raise ConfigurationError("未安装 pyiqa（pip install sedsr[iqa]）") from e
            self._metric = pyiqa.create_metric(self.name, device=self.device)
        return self._metric

    def __call__(self, sr: Tensor, hr: Optional[Tensor] = None) -> float:
        metric = self._load()
        sr = sr.clamp(0, 1).to(self.device)
        with torch.no_grad():
            if self.no_reference:
                value = metric(sr)
            else:
                value = metric(sr, hr.clamp(0, 1).to(self.device))
        return float(value.mean()) if isinstance(value, Tensor) else float(value)


def build_adapter(kind: Optional[str], metric: str) -> Optional[MetricAdapter]:
    """命令行适配器选项：None / "none" 表示未配置，"pyiqa" 表示使用 pyiqa"""
    if not kind or kind == "none":
        return None
    if kind == "pyiqa":
        if not PyiqaAdapter.available():
            logger.warning(f"pyiqa 不可用，{metric} 将标记为 {UNAVAILABLE}")
            return None
        return PyiqaAdapter(metric)
    raise ConfigurationError(f"未知的指标适配器: {kind}")


# ----------------------------------------------------------------------------
# 报告
# ----------------------------------------------------------------------------

@dataclass
class MetricReport:
    dataset_id: str
    checkpoint_id: str
    convention: MetricConvention = field(default_factory=MetricConvention)
    metrics: Sequence[str] = METRICS
    per_image: List[Dict[str, Any]] = field(default_factory=list)
    unavailable: List[str] = field(default_factory=list)

    def add(self, image_id: str, values: Dict[str, float]):
        self.per_image.append({"image": image_id, **{k: float(v) for k, v in values.items()}})

    def mark_unavailable(self, metric: str):
        if metric not in self.unavailable:
            self.unavailable.append(metric)

    def aggregate(self) -> Dict[str, Union[float, str]]:
        """各指标的逐图像算术平均"""
        result: Dict[str, Union[float, str]] = {}
        for metric in self.metrics:
            if metric in self.unavailable:
                result[metric] = UNAVAILABLE
                continue
            values = [row[metric] for row in self.per_image if metric in row]
            if values:
                result[metric] = float(np.mean(values))
        return result

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset": self.dataset_id,
            "checkpoint": self.checkpoint_id,
            "convention": asdict(self.convention),
            "per_image": self.per_image,
            "aggregate": self.aggregate(),
        }

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")
        return path

    def write_text(self, path: Union[str, Path]) -> Path:
        """每幅图像一行，末尾为汇总块；不可用指标写作 ``<metric>: unavailable``"""
        columns = [m for m in self.metrics if m not in self.unavailable]
        lines = [
            f"dataset: {self.dataset_id}",
            f"checkpoint: {self.checkpoint_id}",
            f"convention: color={self.convention.color} crop_border={self.convention.crop_border}",
            "",
            "\t".join(["image"] + columns),
        ]
        for row in self.per_image:
            lines.append("\t".join([row["image"]] + [f"{row[m]:.6f}" if m in row else "-" for m in columns]))
        lines.append("")
        lines.append("[aggregate]")
        for metric, value in self.aggregate().items():
            lines.append(f"{metric}: {value}" if isinstance(value, str) else f"{metric}: {value:.6f}")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def evaluate_pairs(generator: RRDBNet, pairs: Sequence[SamplePair],
                   convention: MetricConvention = MetricConvention(),
                   adapters: Optional[Dict[str, Optional[MetricAdapter]]] = None,
                   extractor: Optional[SemanticExtractor] = None,
                   dataset_id: str = "", checkpoint_id: str = "") -> MetricReport:
    """对每个图像对做推理并计算各项指标"""
    adapters = adapters or {}
    report = MetricReport(dataset_id, checkpoint_id, convention)
    for metric in ("lpips", "niqe"):
        if adapters.get(metric) is None:
            report.mark_unavailable(metric)

    for pair in pairs:
        sr = infer(generator, pair.lr[None], extractor)
        hr = pair.hr[None].to(sr.dtype)
        values = {
            "psnr": psnr(sr, hr, convention)[0],
            "ssim": ssim(sr, hr, convention)[0],
        }
        for metric in ("lpips", "niqe"):
            adapter = adapters.get(metric)
            if adapter is not None:
                values[metric] = adapter(sr, None if adapter.no_reference else hr)
        report.add(pair.source_id, values)
    return report


# ----------------------------------------------------------------------------
# 判别器特征导出
# ----------------------------------------------------------------------------

def export_discriminator_features(disc: BaseDiscriminator, images: Tensor, semantics: Optional[Tensor],
                                  tap: str = "sefb1", labels: Optional[Sequence[str]] = None,
                                  out_dir: Optional[Union[str, Path]] = None) -> np.ndarray:
    """通过 forward hook 截取指定节点输出，全局平均池化为每幅图像一个向量

    写出 features.txt（空格分隔浮点数，每行一幅）与 labels.txt
    """
    taps = disc.taps()
    if tap not in taps:
        raise ConfigurationError(f"{disc.spec.family} 没有特征节点 {tap}，可用: {sorted(taps)}")
    captured: List[Tensor] = []
    handle = taps[tap].register_forward_hook(lambda module, inputs, output: captured.append(output.detach()))
    was_training = disc.training
    disc.eval()
    try:
        with torch.no_grad():
            disc(images, semantics if disc.is_semantic else None)
    finally:
        handle.remove()
        disc.train(was_training)
    features = F.adaptive_avg_pool2d(captured[0], 1).flatten(1).cpu().double().numpy()

    if out_dir is not None:
        labels = list(labels) if labels is not None else [str(i) for i in range(features.shape[0])]
        if len(labels) != features.shape[0]:
            raise ContractError(f"标签数量 {len(labels)} 与图像数量 {features.shape[0]} 不一致")
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(str(out_dir / "features.txt"), features, fmt="%.8e")
        (out_dir / "labels.txt").write_text("\n".join(labels) + "\n", encoding="utf-8")
        logger.info(f"已导出 {features.shape[0]} 条 {tap} 特征到 {out_dir}")
    return features


class EvaluationModule(BaseModule):
    """评估模块：加载生成器检查点，对数据集计算指标并写出报告"""

    def __init__(self, checkpoint: Union[str, Path], out_dir: Union[str, Path],
                 convention: MetricConvention = MetricConvention(),
                 adapters: Optional[Dict[str, Optional[MetricAdapter]]] = None):
        super().__init__("evaluation")
        self.checkpoint = Path(checkpoint)
        self.out_dir = Path(out_dir)
        self.convention = convention
        self.adapters = adapters or {}
        self.generator: Optional[RRDBNet] = None
        self.extractor: Optional[SemanticExtractor] = None

    def _do_initialize(self) -> bool:
        self.generator = load_generator(self.checkpoint)
        if self.generator.is_semantic:
            settings = checkpoint_settings(self.checkpoint)
            if settings is None:
                raise ConfigurationError("Se-RRDB 检查点缺少提取器配置")
            self.extractor = extractor_from_settings(settings)
        payload = read_generator_checkpoint(self.checkpoint)
        self.set_state("checkpoint_id", f"{self.checkpoint.name}:{payload['tag']}@{payload['step']}")
        return True

    def _do_start(self) -> bool:
        return True

    def _do_stop(self) -> bool:
        return True

    def _do_destroy(self) -> bool:
        self.generator = None
        self.extractor = None
        return True

    def evaluate(self, pairs: Sequence[SamplePair], dataset_id: str) -> MetricReport:
        if self.generator is None:
            raise ConfigurationError("评估模块尚未初始化")
        report = evaluate_pairs(self.generator, pairs, self.convention, self.adapters, self.extractor,
                                dataset_id, self.get_state("checkpoint_id", ""))
        report.write_text(self.out_dir / "report.txt")
        report.write_json(self.out_dir / "report.json")
        self._logger.info(f"评估完成: {report.aggregate()}")
        self.publish_event(EventType.EVALUATION_COMPLETED, report.to_dict())
        return report
