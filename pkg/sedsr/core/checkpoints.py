"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

检查点读写
完整训练状态（可精确续训）与仅含生成器的推理检查点
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from .exceptions import ConfigurationError
from .generators import GeneratorSpec, RRDBNet
from .settings import ExperimentSettings

logger = logging.getLogger("sedsr.checkpoints")

GENERATOR_KIND = "generator"
STATE_KIND = "train_state"


@dataclass
class TrainState:
    """可序列化的训练状态：save → load → step 与不间断训练逐位一致"""
    step: int
    tag: str
    generator: Dict[str, Any]
    generator_spec: Dict[str, Any]
    optimizer_g: Dict[str, Any]
    scheduler_g: Optional[Dict[str, Any]] = None
    discriminator: Optional[Dict[str, Any]] = None
    discriminator_family: str = ""
    optimizer_d: Optional[Dict[str, Any]] = None
    scheduler_d: Optional[Dict[str, Any]] = None
    rng: Dict[str, Any] = field(default_factory=dict)
    settings: Dict[str, Any] = field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = dict(self.__dict__)
        payload["kind"] = STATE_KIND
        torch.save(payload, str(path))
        logger.info(f"训练状态已保存: {path} (step {self.step})")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TrainState":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"找不到训练状态: {path}")
        payload = torch.load(str(path), map_location="cpu", weights_only=False)
        if payload.pop("kind", None) != STATE_KIND:
            raise ConfigurationError(f"不是训练状态文件: {path}")
        return cls(**payload)


def capture_rng() -> Dict[str, Any]:
    return {"torch": torch.get_rng_state(), "numpy": np.random.get_state()}


def restore_rng(state: Dict[str, Any]):
    if "torch" in state:
        torch.set_rng_state(state["torch"])
    if "numpy" in state:
        np.random.set_state(state["numpy"])


def save_generator(path: Union[str, Path], generator: RRDBNet, tag: str, step: int,
                   settings: Optional[ExperimentSettings] = None) -> Path:
    """只保存生成器（推理不需要判别器与提取器）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "kind": GENERATOR_KIND,
        "tag": tag,
        "step": int(step),
        "spec": generator.spec.to_dict(),
        "state_dict": generator.state_dict(),
        "settings": settings.to_params() if settings is not None else {},
    }, str(path))
    logger.info(f"生成器检查点已保存: {path} ({tag}, step {step})")
    return path


def read_generator_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"找不到生成器检查点: {path}")
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    if payload.get("kind") != GENERATOR_KIND:
        raise ConfigurationError(f"不是生成器检查点: {path}")
    return payload


def load_generator(path: Union[str, Path]) -> RRDBNet:
    """按检查点中记录的规格重建生成器并加载权重"""
    payload = read_generator_checkpoint(path)
    generator = RRDBNet(GeneratorSpec.from_dict(payload["spec"]))
    generator.load_state_dict(payload["state_dict"])
    generator.eval()
    logger.info(f"已加载生成器: {path} ({payload['tag']}, step {payload['step']})")
    return generator


def checkpoint_settings(path: Union[str, Path]) -> Optional[ExperimentSettings]:
    params = read_generator_checkpoint(path).get("settings") or {}
    return ExperimentSettings.from_params(params) if params else None
