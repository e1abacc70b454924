"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

×4 超分成对数据管线
双三次退化、成对裁块、二面体增强，以及桌面规模使用的确定性合成数据集
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Union

import cv2
import numpy as np
import torch
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from .exceptions import ConfigurationError, ContractError, ShapeError
from .image_processor import ImageProcessor
from .settings import ExperimentSettings

logger = logging.getLogger("sedsr.data")

SCALE = 4
CUBIC_A = -0.5
PATCH_MULTIPLE = 32


# ----------------------------------------------------------------------------
# 双三次退化
# ----------------------------------------------------------------------------

def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """三次卷积核（a=-0.5）"""
    ax = np.abs(x)
    ax2, ax3 = ax ** 2, ax ** 3
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_weights(in_size: int, scale: int) -> np.ndarray:
    """out×in 的一维缩小权重矩阵

    输出像素 i 的中心对应输入坐标 (i+0.5)·s-0.5；核支撑按 s 拉宽（抗混叠），
    越界的采样位置复制边缘像素，每行权重归一化为 1。
    """
    out_size = in_size // scale
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    support = 2.0 * scale
    for i in range(out_size):
        center = (i + 0.5) * scale - 0.5
        first = int(np.floor(center - support)) + 1
        last = int(np.ceil(center + support)) - 1
        taps = np.arange(first, last + 1)
        w = cubic((taps - center) / scale)
        np.add.at(weights[i], np.clip(taps, 0, in_size - 1), w)
        weights[i] /= weights[i].sum()
    weights.setflags(write=False)
    return weights


def bicubic_downsample(hr: Tensor, scale: int = SCALE) -> Tensor:
    """抗混叠双三次缩小（...×H×W -> ...×H/s×W/s），可分离实现"""
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise ShapeError(f"图像尺寸 {h}x{w} 不能被 {scale} 整除")
    wh = torch.tensor(resize_weights(h, scale), dtype=hr.dtype, device=hr.device)
    ww = torch.tensor(resize_weights(w, scale), dtype=hr.dtype, device=hr.device)
    return torch.einsum("oh,...hw,pw->...op", wh, hr, ww)


# ----------------------------------------------------------------------------
# 样本与增强
# ----------------------------------------------------------------------------

@dataclass
class SamplePair:
    lr: Tensor
    hr: Tensor
    source_id: str

    def __post_init__(self):
        hh, hw = self.hr.shape[-2:]
        lh, lw = self.lr.shape[-2:]
        if (hh, hw) != (lh * SCALE, lw * SCALE):
            raise ShapeError(f"HR {hh}x{hw} 与 LR {lh}x{lw} 不是 ×{SCALE} 关系")
        if hh % PATCH_MULTIPLE or hw % PATCH_MULTIPLE:
            raise ShapeError(f"HR 尺寸必须是 {PATCH_MULTIPLE} 的倍数: {hh}x{hw}")
        for t in (self.lr, self.hr):
            if t.min() < 0.0 or t.max() > 1.0:
                raise ContractError(f"样本取值必须在 [0,1] 之间: {self.source_id}")


@dataclass
class PairBatch:
    lr: Tensor
    hr: Tensor
    source_ids: List[str]


def augment(image: Tensor, code: int) -> Tensor:
    """八种二面体变换：bit0 水平翻转，bit1 垂直翻转，bit2 旋转 90°"""
    if not 0 <= code < 8:
        raise ConfigurationError(f"增强编码必须在 0..7 之间: {code}")
    if code & 1:
        image = torch.flip(image, dims=(-1,))
    if code & 2:
        image = torch.flip(image, dims=(-2,))
    if code & 4:
        image = torch.rot90(image, k=1, dims=(-2, -1))
    return image


def augment_pair(pair: SamplePair, code: int) -> SamplePair:
    return SamplePair(augment(pair.lr, code), augment(pair.hr, code), pair.source_id)


# ----------------------------------------------------------------------------
# 数据集
# ----------------------------------------------------------------------------

class PairedImageSet:
    """HR 图像集合；LR 由文件读入或按需双三次生成"""

    def __init__(self):
        self._lr_cache = {}

    def __len__(self) -> int:
        raise NotImplementedError

    def source_id(self, index: int) -> str:
        raise NotImplementedError

    def hr(self, index: int) -> Tensor:
        raise NotImplementedError

    def stored_lr(self, index: int) -> Optional[Tensor]:
        return None

    def lr(self, index: int) -> Tensor:
        if index not in self._lr_cache:
            stored = self.stored_lr(index)
            if stored is None:
                # 与存为 8 位文件再读回的 LR 一致
                stored = torch.round(bicubic_downsample(self.hr(index)).clamp(0.0, 1.0) * 255.0) / 255.0
            self._lr_cache[index] = stored
        return self._lr_cache[index]

    def full_pair(self, index: int) -> SamplePair:
        """整幅图像对（中心裁剪到 32 的倍数），评估使用"""
        hr, lr = self.hr(index), self.lr(index)
        h, w = hr.shape[-2:]
        th, tw = h - h % PATCH_MULTIPLE, w - w % PATCH_MULTIPLE
        top = ((h - th) // 2) // SCALE * SCALE
        left = ((w - tw) // 2) // SCALE * SCALE
        return SamplePair(
            lr[:, top // SCALE:(top + th) // SCALE, left // SCALE:(left + tw) // SCALE],
            hr[:, top:top + th, left:left + tw],
            self.source_id(index),
        )


class SyntheticDataset(PairedImageSet):

    def __init__(self, images: Sequence[np.ndarray], seed: int):
        super().__init__()
        self._images = [ImageProcessor.to_tensor(img) for img in images]
        self.seed = seed

    def __len__(self) -> int:
        return len(self._images)

    def source_id(self, index: int) -> str:
        return f"synth{self.seed}_{index:03d}"

    def hr(self, index: int) -> Tensor:
        return self._images[index]

    def images(self) -> List[np.ndarray]:
        return [ImageProcessor.to_numpy(t) for t in self._images]


class ImageFolderDataset(PairedImageSet):
    """``<root>/hr/*.png``，可选 ``<root>/lr_x4/`` 按文件名配对"""

    def __init__(self, root: Union[str, Path]):
        super().__init__()
        self.root = Path(root).expanduser()
        hr_dir = self.root / "hr"
        if not hr_dir.is_dir():
            raise ConfigurationError(f"数据目录缺少 hr/ 子目录: {self.root}")
        self._files = ImageProcessor.list_images(hr_dir)
        if not self._files:
            raise ConfigurationError(f"hr/ 目录中没有图像: {hr_dir}")
        self._lr_dir = self.root / "lr_x4"
        logger.info(f"图像数据集 {self.root}: {len(self._files)} 幅")

    def __len__(self) -> int:
        return len(self._files)

    def source_id(self, index: int) -> str:
        return self._files[index].stem

    def hr(self, index: int) -> Tensor:
        image = ImageProcessor.read_image(self._files[index])
        h, w = image.shape[:2]
        return ImageProcessor.to_tensor(image[:h - h % SCALE, :w - w % SCALE])

    def stored_lr(self, index: int) -> Optional[Tensor]:
        path = self._lr_dir / self._files[index].name
        if not path.is_file():
            return None
        lr = ImageProcessor.to_tensor(ImageProcessor.read_image(path))
        hr = self.hr(index)
        if tuple(lr.shape[-2:]) != (hr.shape[-2] // SCALE, hr.shape[-1] // SCALE):
            raise ShapeError(f"LR 文件尺寸与 HR 不匹配: {path}")
        return lr


def _checkerboard(rng: np.random.Generator, size: int) -> np.ndarray:
    pitch = int(rng.integers(4, 33))
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((yy // pitch + xx // pitch) % 2).astype(np.float64)[..., None]
    return c0 * (1 - mask) + c1 * mask


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    angle = rng.uniform(0, 2 * np.pi)
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = ((t - t.min()) / max(t.max() - t.min(), 1e-12))[..., None]
    return c0 * (1 - t) + c1 * t


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.random((size, size, 3)).astype(np.float32)
    sigma = float(rng.uniform(1.5, 4.0))
    blurred = cv2.GaussianBlur(noise, (0, 0), sigma, borderType=cv2.BORDER_REFLECT).astype(np.float64)
    low, high = blurred.min(), blurred.max()
    return 0.1 + 0.8 * (blurred - low) / max(high - low, 1e-12)


def _composite(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = _gradient(rng, size)[..., :1]
    return _checkerboard(rng, size) * mask + _smooth_noise(rng, size) * (1 - mask)


SYNTH_GENERATORS = (_checkerboard, _gradient, _smooth_noise, _composite)


def synth_dataset(seed: int, n_images: int, hr_size: int) -> SyntheticDataset:
    """确定性生成 n 幅 HR 图像（棋盘格、线性渐变、平滑噪声及其合成），按 8 位量化"""
    if hr_size % SCALE:
        raise ShapeError(f"hr_size 必须是 {SCALE} 的倍数: {hr_size}")
    rng = np.random.default_rng(seed)
    images = []
    for k in range(n_images):
        image = SYNTH_GENERATORS[k % len(SYNTH_GENERATORS)](rng, hr_size)
        images.append(ImageProcessor.quantize(np.clip(image, 0.0, 1.0)))
    return SyntheticDataset(images, seed)


def dataset_from_settings(settings: ExperimentSettings) -> PairedImageSet:
    if settings.data.root:
        return ImageFolderDataset(settings.data.root)
    return synth_dataset(settings.data_seed(), settings.data.n_images, settings.data.hr_size)


# ----------------------------------------------------------------------------
# 采样
# ----------------------------------------------------------------------------

def sample_patch_pair(dataset: PairedImageSet, rng: np.random.Generator,
                      patch_size: int = 256, augment_enabled: bool = True) -> SamplePair:
    """随机对齐裁块：HR 裁块起点为 4 的倍数，LR 坐标为其 1/4；增强同时作用于两者

    尺寸不足的图像记录警告并跳过
    """
    if patch_size % PATCH_MULTIPLE:
        raise ShapeError(f"patch_size 必须是 {PATCH_MULTIPLE} 的倍数: {patch_size}")
    order = rng.permutation(len(dataset))
    for index in order:
        index = int(index)
        hr = dataset.hr(index)
        h, w = hr.shape[-2:]
        if h < patch_size or w < patch_size:
            logger.warning(f"图像 {dataset.source_id(index)} ({h}x{w}) 小于裁块尺寸 {patch_size}，跳过")
            continue
        lr = dataset.lr(index)
        top = SCALE * int(rng.integers((h - patch_size) // SCALE + 1))
        left = SCALE * int(rng.integers((w - patch_size) // SCALE + 1))
        lp = patch_size // SCALE
        pair = SamplePair(
            lr[:, top // SCALE:top // SCALE + lp, left // SCALE:left // SCALE + lp].contiguous(),
            hr[:, top:top + patch_size, left:left + patch_size].contiguous(),
            dataset.source_id(index),
        )
        code = int(rng.integers(8)) if augment_enabled else 0
        return augment_pair(pair, code) if code else pair
    raise ShapeError(f"没有任何图像不小于裁块尺寸 {patch_size}")


class PatchSampler(Dataset):
    """第 n 个样本由 (seed, n) 派生的独立随机流决定，与 DataLoader 的进程数无关"""

    def __init__(self, dataset: PairedImageSet, patch_size: int, seed: int, augment_enabled: bool = True):
        self.dataset = dataset
        self.patch_size = patch_size
        self.seed = int(seed)
        self.augment_enabled = augment_enabled

    def __len__(self) -> int:
        return 2 ** 62

    def __getitem__(self, n: int) -> SamplePair:
        rng = np.random.default_rng([self.seed, int(n)])
        return sample_patch_pair(self.dataset, rng, self.patch_size, self.augment_enabled)


def collate_pairs(pairs: Sequence[SamplePair]) -> PairBatch:
    return PairBatch(
        lr=torch.stack([p.lr for p in pairs]),
        hr=torch.stack([p.hr for p in pairs]),
        source_ids=[p.source_id for p in pairs],
    )


def batch_loader(sampler: PatchSampler, batch_size: int, start_step: int, num_steps: int,
                 num_workers: int = 0) -> DataLoader:
    """第 t 步的批次固定为样本 t·B .. (t+1)·B-1，从 start_step 开始"""
    indices = range(start_step * batch_size, (start_step + num_steps) * batch_size)
    return DataLoader(sampler, batch_size=batch_size, sampler=indices, num_workers=num_workers,
                      collate_fn=collate_pairs, shuffle=False)


def held_out_pairs(settings: ExperimentSettings, n_images: int) -> List[SamplePair]:
    """独立种子生成的合成评估图像"""
    dataset = synth_dataset(settings.data_seed() + 10007, n_images, max(settings.data.patch_size, 64))
    return [dataset.full_pair(i) for i in range(len(dataset))]
