"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

命令行入口
子命令: pretrain / train / eval / infer / features / ablate

退出码:
    0  成功
    1  运行时失败（诊断信息写入 <out>/error.json）
    2  配置或用法错误
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional, Sequence

import cv2
import numpy as np
import torch

from .core.checkpoints import TrainState, checkpoint_settings, load_generator
from .core.data import ImageFolderDataset, synth_dataset
from .core.discriminators import build_discriminator
from .core.evaluation import EvaluationModule, build_adapter, export_discriminator_features
from .core.exceptions import ConfigurationError
from .core.generators import infer
from .core.image_processor import ImageProcessor
from .core.semantic_extractor import extractor_from_settings, fit_to_multiple
from .core.settings import ExperimentSettings, apply_overrides, load_settings
from .core.training_module import ABLATION_AXES, pretrain_psnr, run_ablation, run_experiment
from .utils.logger import attach_run_log, detach_run_log

logger = logging.getLogger("sedsr.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedsr", description="语义感知判别器超分辨率实验工具")
    sub = parser.add_subparsers(dest="verb", metavar="verb", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True):
        p.add_argument("--config", help="INI 配置文件")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="覆盖配置项，可重复")
        p.add_argument("--out", required=out_required, help="输出目录")
        p.add_argument("--device", default="cpu", help="计算设备（默认 cpu）")

    p = sub.add_parser("pretrain", help="仅 L1 的生成器预训练")
    common(p)
    p.add_argument("--iterations", type=int, help="覆盖 train.iterations")
    p.add_argument("--resume", help="训练状态文件")

    p = sub.add_parser("train", help="GAN 训练并在留出集上评估")
    common(p)
    p.add_argument("--resume", help="训练状态文件")

    p = sub.add_parser("eval", help="计算 PSNR/SSIM（及可选 LPIPS/NIQE）报告")
    common(p)
    p.add_argument("--checkpoint", required=True, help="生成器检查点")
    p.add_argument("--data", help="数据集根目录（含 hr/ 与可选 lr_x4/），缺省使用合成数据")
    p.add_argument("--lpips", choices=("none", "pyiqa"), default="none")
    p.add_argument("--niqe", choices=("none", "pyiqa"), default="none")

    p = sub.add_parser("infer", help="低分辨率图像 -> 4 倍超分辨率图像")
    common(p)
    p.add_argument("--checkpoint", required=True, help="生成器检查点")
    p.add_argument("inputs", nargs="+", help="图像文件或目录")

    p = sub.add_parser("features", help="导出判别器中间特征")
    common(p)
    p.add_argument("--checkpoint", required=True, help="训练状态文件（含判别器）")
    p.add_argument("--tap", help="特征节点（默认 sed 族为 sefb1，vanilla 族为 bn1）")
    p.add_argument("--labels", help="标签文件，每行一个")
    p.add_argument("inputs", nargs="+", help="图像文件或目录")

    p = sub.add_parser("ablate", help="沿单个配置轴扫描")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    return parser


def _settings(args) -> ExperimentSettings:
    return load_settings(args.config, args.overrides)


def _expand_inputs(inputs: Sequence[str]) -> List[Path]:
    paths = []
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            paths.extend(ImageProcessor.list_images(path))
        elif path.is_file():
            paths.append(path)
        else:
            raise ConfigurationError(f"找不到输入: {item}")
    if not paths:
        raise ConfigurationError("没有可处理的输入图像")
    return paths


def cmd_pretrain(args) -> int:
    path = pretrain_psnr(_settings(args), args.out, args.iterations, args.resume, args.device)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    summary = run_experiment(_settings(args), args.out, args.resume, args.device)
    print(json.dumps({k: summary.get(k) for k in ("steps", "generator", "psnr", "ssim")}, ensure_ascii=False))
    return EXIT_OK


def cmd_eval(args) -> int:
    settings = _settings(args)
    if args.data:
        dataset = ImageFolderDataset(args.data)
        dataset_id = str(Path(args.data).name)
    else:
        dataset = synth_dataset(settings.data_seed(), settings.data.n_images, settings.data.hr_size)
        dataset_id = f"synthetic_seed{settings.data_seed()}"
    pairs = [dataset.full_pair(i) for i in range(len(dataset))]

    adapters = {"lpips": build_adapter(args.lpips, "lpips"), "niqe": build_adapter(args.niqe, "niqe")}
    with EvaluationModule(args.checkpoint, args.out, adapters=adapters) as module:
        report = module.evaluate(pairs, dataset_id)
    print(json.dumps(report.aggregate(), ensure_ascii=False))
    return EXIT_OK


def cmd_infer(args) -> int:
    """只加载生成器；Se-RRDB 检查点额外按其记录的配置构建提取器"""
    generator = load_generator(args.checkpoint)
    extractor = None
    if generator.is_semantic:
        settings = checkpoint_settings(args.checkpoint)
        if settings is None:
            raise ConfigurationError("Se-RRDB 检查点缺少提取器配置")
        extractor = extractor_from_settings(settings)

    out_dir = Path(args.out)
    for path in _expand_inputs(args.inputs):
        lr = ImageProcessor.to_tensor(ImageProcessor.read_image(path))[None]
        sr = infer(generator, lr, extractor)
        target = out_dir / f"{path.stem}_x4{path.suffix if path.suffix.lower() in ('.tif', '.tiff') else '.png'}"
        ImageProcessor.write_image(target, ImageProcessor.to_numpy(sr))
        logger.info(f"{path.name}: {tuple(lr.shape[-2:])} -> {tuple(sr.shape[-2:])} 已保存到 {target}")
    return EXIT_OK


def _load_feature_images(paths: Sequence[Path], size: int) -> torch.Tensor:
    images = []
    for path in paths:
        image = ImageProcessor.to_tensor(ImageProcessor.read_image(path))[None]
        image = fit_to_multiple(image, 32, mode="crop")
        if image.shape[-2:] != (size, size):
            array = cv2.resize(ImageProcessor.to_numpy(image), (size, size), interpolation=cv2.INTER_AREA)
            image = ImageProcessor.to_tensor(np.clip(array, 0.0, 1.0))[None]
        images.append(image)
    return torch.cat(images)


def cmd_features(args) -> int:
    state = TrainState.load(args.checkpoint)
    if state.discriminator is None:
        raise ConfigurationError(f"训练状态不含判别器: {args.checkpoint}")
    settings = apply_overrides(ExperimentSettings.from_params(state.settings), args.overrides).validate()
    disc = build_discriminator(settings)
    disc.load_state_dict(state.discriminator)

    paths = _expand_inputs(args.inputs)
    images = _load_feature_images(paths, settings.disc.image_size)
    semantics = extractor_from_settings(settings).extract(images).data if disc.is_semantic else None

    labels = [p.stem for p in paths]
    if args.labels:
        labels = [line.strip() for line in Path(args.labels).read_text(encoding="utf-8").splitlines() if line.strip()]
    tap = args.tap or ("sefb1" if disc.is_semantic else "bn1" if "bn1" in disc.taps() else "block1")
    features = export_discriminator_features(disc, images, semantics, tap, labels, args.out)
    print(f"{features.shape[0]}x{features.shape[1]} -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run_dirs = run_ablation(_settings(args), args.axis, args.out, device=args.device)
    for run_dir in run_dirs:
        print(run_dir)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "features": cmd_features,
    "ablate": cmd_ablate,
}


def _write_error(out: Optional[str], error: BaseException) -> Path:
    out_dir = Path(out) if out else Path.cwd()
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "error.json"
    record = {"type": type(error).__name__, "message": str(error), "traceback": traceback.format_exc()}
    if getattr(error, "record", None):
        record["record"] = {k: str(v) for k, v in error.record.items()}
    path.write_text(json.dumps(record, indent=2, ensure_ascii=False), encoding="utf-8")
    return path


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    handler = attach_run_log(args.out) if args.out else None
    try:
        return COMMANDS[args.verb](args)
    except ConfigurationError as e:
        logger.error(f"配置错误: {e}")
        print(f"sedsr {args.verb}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        path = _write_error(getattr(args, "out", None), e)
        logger.error(f"{args.verb} 失败: {e}，诊断信息: {path}")
        print(f"sedsr {args.verb}: {e} (诊断信息: {path})", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if handler is not None:
            detach_run_log(handler)
