"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

用于结果绘制的工具类
"""

from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import cv2
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

TITLE_FONT_SCALE = 0.5
TITLE_THICKNESS = 1
TITLE_COLOR = (255, 255, 255)
TITLE_REFERENCE_HEIGHT = 256

LOSS_COLUMNS = ("l_pixel", "l_perceptual", "l_adv_g", "l_d")


class ResultPlotter:
    """结果绘制工具类，负责损失曲线与语义热力图"""

    @staticmethod
    def plot_loss_curves(history: Dict[str, Sequence[float]], path: Union[str, Path],
                         title: str = "losses") -> Path:
        """绘制损失曲线

        Args:
            history: 必须包含 step 列，其余列按 LOSS_COLUMNS 顺序各占一个子图
            path: 输出 png 路径
        """
        if "step" not in history:
            raise ValueError("损失记录缺少 step 列")
        columns = [c for c in LOSS_COLUMNS if c in history]
        fig = Figure(figsize=(4 * max(len(columns), 1), 3.2), dpi=100)
        FigureCanvasAgg(fig)
        steps = np.asarray(history["step"])
        for i, column in enumerate(columns):
            ax = fig.add_subplot(1, len(columns), i + 1)
            ax.plot(steps, np.asarray(history[column], dtype=np.float64), linewidth=1.0)
            ax.set_title(column)
            ax.set_xlabel("step")
            ax.grid(True, alpha=0.3)
        fig.suptitle(title)
        fig.tight_layout()

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(str(path))
        return path

    @staticmethod
    def heatmap_overlay(image: np.ndarray, energy: np.ndarray, alpha: float = 0.5) -> np.ndarray:
        """把 [0,1] 能量图放大到图像尺寸后以 JET 色表叠加，返回 BGR uint8"""
        h, w = image.shape[:2]
        energy = cv2.resize(energy.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
        colored = cv2.applyColorMap(np.round(np.clip(energy, 0, 1) * 255).astype(np.uint8), cv2.COLORMAP_JET)
        base = cv2.cvtColor(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        return cv2.addWeighted(base, 1.0 - alpha, colored, alpha, 0)

    @staticmethod
    def create_row_canvas(images: List[np.ndarray], titles: List[str]) -> Tuple[np.ndarray, List[int]]:
        """横向拼接等高 BGR 图像并标注标题"""
        if len(images) != len(titles) or not images:
            raise ValueError("图像与标题数量必须一致且不为空")
        h = images[0].shape[0]
        if any(img.shape[0] != h for img in images):
            raise ValueError("所有图像高度必须一致")

        offsets = list(np.cumsum([0] + [img.shape[1] for img in images[:-1]]))
        canvas = np.zeros((h, sum(img.shape[1] for img in images), 3), dtype=np.uint8)

        # 标题大小随图像高度缩放
        scale = h / TITLE_REFERENCE_HEIGHT
        font_scale = TITLE_FONT_SCALE * scale
        thickness = max(1, round(TITLE_THICKNESS * scale))
        y_offset = max(12, round(18 * scale))

        for img, x, title in zip(images, offsets, titles):
            if img.ndim == 2:
                img = cv2.cvtColor(img, cv2.COLOR_GRAY2BGR)
            canvas[:, x:x + img.shape[1]] = img
            cv2.putText(canvas, title, (int(x) + 5, y_offset), cv2.FONT_HERSHEY_SIMPLEX,
                        font_scale, TITLE_COLOR, thickness)
        return canvas, [int(x) for x in offsets]

    @staticmethod
    def save_semantic_heatmap(image: np.ndarray, energy: np.ndarray, path: Union[str, Path]) -> Path:
        """保存“原图 | 语义热力图”对照图"""
        base = cv2.cvtColor(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
        canvas, _ = ResultPlotter.create_row_canvas(
            [base, ResultPlotter.heatmap_overlay(image, energy)], ["image", "semantics"])
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not cv2.imwrite(str(path), canvas):
            raise IOError(f"无法写入图像: {path}")
        return path
