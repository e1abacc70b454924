"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

图像读写与颜色空间工具
内部统一使用 HxWx3、RGB 通道顺序、取值 [0,1] 的 float32 数组；张量为 3xHxW
"""

from pathlib import Path
from typing import Union

import cv2
import numpy as np
import tifffile
import torch

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

class ImageProcessor:

    @staticmethod
    def read_image(path: Union[str, Path]) -> np.ndarray:
        """读取 8 位 RGB 图像并转换到 [0,1]

        Args:
            path: 图像路径（png/jpg/bmp 使用 OpenCV，tif 使用 tifffile）

        Returns:
            HxWx3 float32 数组
        """
        path = Path(path)
        if path.suffix.lower() in (".tif", ".tiff"):
            data = tifffile.imread(str(path))
            scale = 65535.0 if data.dtype == np.uint16 else 255.0
            image = data.astype(np.float32) / scale
            if image.ndim == 2:
                image = np.repeat(image[:, :, None], 3, axis=2)
            return image[:, :, :3]

        data = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if data is None:
            raise FileNotFoundError(f"无法读取图像: {path}")
        return cv2.cvtColor(data, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0

    @staticmethod
    def write_image(path: Union[str, Path], image: np.ndarray):
        """保存 [0,1] RGB 图像；tif 扩展名保存为 16 位，其余保存为 8 位"""
        if not isinstance(image, np.ndarray):
            raise TypeError("输入必须是numpy数组类型")
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError("输入图像必须是 HxWx3 数组")

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        image = np.clip(image, 0.0, 1.0)
        if path.suffix.lower() in (".tif", ".tiff"):
            tifffile.imwrite(str(path), np.round(image * 65535.0).astype(np.uint16))
            return
        data = np.round(image * 255.0).astype(np.uint8)
        if not cv2.imwrite(str(path), cv2.cvtColor(data, cv2.COLOR_RGB2BGR)):
            raise IOError(f"无法写入图像: {path}")

    @staticmethod
    def quantize(image: np.ndarray) -> np.ndarray:
        """量化到 8 位灰阶（与存盘再读回的结果一致）"""
        return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)

    @staticmethod
    def to_tensor(image: np.ndarray) -> torch.Tensor:
        """HxWx3 数组 -> 3xHxW 张量"""
        return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()

    @staticmethod
    def to_numpy(tensor: torch.Tensor) -> np.ndarray:
        """3xHxW 张量 -> HxWx3 float32 数组"""
        if tensor.dim() == 4:
            if tensor.shape[0] != 1:
                raise ValueError("只能转换单张图像")
            tensor = tensor[0]
        return tensor.detach().cpu().float().numpy().transpose(1, 2, 0).copy()

    @staticmethod
    def rgb_to_y(image: np.ndarray) -> np.ndarray:
        """ITU-R BT.601 亮度分量（[0,1] 输入，输出为 Y/255 的 [16/255, 235/255] 范围）

        Args:
            image: ...x3xHxW 的 float64 数组（通道在倒数第三维）
        """
        r, g, b = image[..., 0, :, :], image[..., 1, :, :], image[..., 2, :, :]
        return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0

    @staticmethod
    def list_images(directory: Union[str, Path]):
        """按文件名排序列出目录下的图像文件"""
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"目录不存在: {directory}")
        return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
