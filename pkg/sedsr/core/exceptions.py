"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

框架异常定义
"""

from typing import Any, Dict, Optional


class SedSRError(Exception):
    """框架异常基类"""


class ConfigurationError(SedSRError, ValueError):
    """配置或规格无效（层号越界、未知模式、缺少适配器/检查点等）"""


class ShapeError(SedSRError, ValueError):
    """输入尺寸不满足整除或固定尺寸约束"""


class ContractError(SedSRError, ValueError):
    """协作张量之间的形状/通道契约被破坏"""


class NumericalError(SedSRError, ArithmeticError):
    """出现非有限值（NaN/Inf）

    Args:
        message: 异常描述
        record: 诊断记录（步数、各项损失、梯度范数等）
    """

    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.record = dict(record or {})
