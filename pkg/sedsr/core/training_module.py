"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

训练模块
PSNR 预训练与带语义判别器的 GAN 微调；每步先更新判别器再更新生成器，
S_h = φ(I_h) 每步只计算一次并由真/假两支共享
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor, nn

from .base_module import BaseModule
from .checkpoints import TrainState, capture_rng, read_generator_checkpoint, restore_rng, save_generator
from .data import PairBatch, PatchSampler, batch_loader, dataset_from_settings, held_out_pairs
from .discriminators import BaseDiscriminator, build_discriminator, discriminate
from .evaluation import MetricConvention, evaluate_pairs
from .events import EventType
from .exceptions import ConfigurationError, NumericalError
from .generators import GeneratorSpec, RRDBNet, build_generator, lr_semantics
from .image_processor import ImageProcessor
from .losses import (
    LossWeights, build_perceptual_adapter, discriminator_loss, generator_total_loss, pixel_loss,
)
from .result_plotter import ResultPlotter
from .semantic_extractor import SemanticExtractor, extractor_from_settings, semantic_energy
from .settings import ExperimentSettings

PHASE_PSNR = "psnr"
PHASE_GAN = "gan"

CSV_COLUMNS = ("step", "l_pixel", "l_perceptual", "l_adv_g", "l_d", "grad_norm_g", "grad_norm_d")

ABLATION_AXES = {
    "extractor.layer": (1, 2, 3, 4),
    "sefb.fusion_mode": ("sefb", "concat", "channel_attention", "spatial_attention"),
    "extractor.kind": ("clip_rn50", "resnet50"),
}


def configure_determinism(enabled: bool) -> Optional[Tuple[bool, bool, int]]:
    """单线程 + 确定性算法（相同配置与种子得到逐位一致的损失记录）

    Returns:
        修改前的 (deterministic, warn_only, num_threads)，未修改时为 None
    """
    if not enabled:
        return None
    previous = (torch.are_deterministic_algorithms_enabled(),
                torch.is_deterministic_algorithms_warn_only_enabled(),
                torch.get_num_threads())
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.set_num_threads(1)
    return previous


def restore_determinism(previous: Optional[Tuple[bool, bool, int]]):
    if previous is None:
        return
    enabled, warn_only, threads = previous
    torch.use_deterministic_algorithms(enabled, warn_only=warn_only)
    torch.set_num_threads(threads)


def _grad_norm(parameters) -> float:
    norms = [p.grad.detach().norm() for p in parameters if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.stack(norms).norm())


def _has_grad(module: nn.Module) -> bool:
    return any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in module.parameters())


class TrainingModule(BaseModule):
    """训练模块

    Args:
        settings: 实验配置
        out_dir: 输出目录（losses.csv、检查点、图表）
        phase: "psnr"（仅像素损失）或 "gan"
        extractor: 预先构建的语义提取器（为空时按配置构建）
        device: 训练设备
    """

    def __init__(self, settings: ExperimentSettings, out_dir: Union[str, Path], phase: str = PHASE_GAN,
                 extractor: Optional[SemanticExtractor] = None, device: str = "cpu"):
        super().__init__("training")
        if phase not in (PHASE_PSNR, PHASE_GAN):
            raise ConfigurationError(f"未知的训练阶段: {phase}")
        self.settings = settings.validate()
        self.out_dir = Path(out_dir)
        self.phase = phase
        self.device = torch.device(device)
        self.extractor = extractor

        self.generator: Optional[RRDBNet] = None
        self.discriminator: Optional[BaseDiscriminator] = None
        self.optimizer_g = None
        self.optimizer_d = None
        self.scheduler_g = None
        self.scheduler_d = None
        self.adapter = None
        self.sampler: Optional[PatchSampler] = None
        self.weights = LossWeights.from_settings(settings)

        self.step = 0
        self.semantic_calls = 0
        self.check_partition = False
        self.last_partition: Dict[str, bool] = {}
        self.history: Dict[str, List[float]] = {c: [] for c in CSV_COLUMNS}
        self._determinism: Optional[Tuple[bool, bool, int]] = None
        self._failure_context: Dict[str, float] = {}
        self._stop_requested = False

    # ------------------------------------------------------------------
    # 生命周期
    # ------------------------------------------------------------------

    def _needs_extractor(self) -> bool:
        s = self.settings
        if GeneratorSpec.from_settings(s).is_semantic:
            return True
        if self.phase == PHASE_PSNR:
            return False
        return s.disc.is_semantic or (s.loss.perceptual == "extractor" and s.loss.lambda_p > 0)

    def _do_initialize(self) -> bool:
        s = self.settings
        self._determinism = configure_determinism(s.train.deterministic)
        torch.manual_seed(s.train.seed)
        np.random.seed(s.train.seed % 2 ** 32)

        if self.extractor is None and self._needs_extractor():
            self.extractor = extractor_from_settings(s)
        if self.extractor is not None:
            self.extractor.to(self.device)

        self.generator = build_generator(s).to(self.device)
        self.optimizer_g = torch.optim.Adam(self.generator.parameters(), lr=s.train.lr_g,
                                            betas=(s.train.beta1, s.train.beta2))
        self.scheduler_g = self._scheduler(self.optimizer_g)

        if self.phase == PHASE_GAN:
            self.discriminator = build_discriminator(s).to(self.device)
            self.optimizer_d = torch.optim.Adam(self.discriminator.parameters(), lr=s.train.lr_d,
                                                betas=(s.train.beta1, s.train.beta2))
            self.scheduler_d = self._scheduler(self.optimizer_d)
            if self.weights.lambda_perceptual > 0:
                self.adapter = build_perceptual_adapter(s, self.extractor)
                if isinstance(self.adapter, nn.Module):
                    self.adapter.to(self.device)
            if s.train.init == "psnr":
                self._load_psnr_init()

        self.sampler = PatchSampler(dataset_from_settings(s), s.data.patch_size, s.data_seed(), s.data.augment)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return True

    def _do_start(self) -> bool:
        self._stop_requested = False
        self.publish_event(EventType.RUN_STARTED, {"phase": self.phase, "out_dir": str(self.out_dir)})
        return True

    def _do_stop(self) -> bool:
        self._stop_requested = True
        return True

    def _do_destroy(self) -> bool:
        self.generator = None
        self.discriminator = None
        self.optimizer_g = self.optimizer_d = None
        self.scheduler_g = self.scheduler_d = None
        self.adapter = None
        self.sampler = None
        restore_determinism(self._determinism)
        self._determinism = None
        return True

    def _scheduler(self, optimizer):
        milestones = list(self.settings.train.milestones)
        if not milestones:
            return None
        return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones,
                                                    gamma=self.settings.train.gamma)

    def _load_psnr_init(self):
        path = self.settings.train.psnr_checkpoint
        if not path:
            raise ConfigurationError("train.init=psnr 需要 train.psnr_checkpoint")
        payload = read_generator_checkpoint(path)
        if payload["tag"] != PHASE_PSNR:
            raise ConfigurationError(f"检查点不是 psnr 预训练结果: {path} ({payload['tag']})")
        if GeneratorSpec.from_dict(payload["spec"]) != self.generator.spec:
            raise ConfigurationError(f"预训练检查点的生成器规格与配置不一致: {path}")
        self.generator.load_state_dict(payload["state_dict"])
        self._logger.info(f"生成器已用 PSNR 预训练权重初始化: {path}")

    # ------------------------------------------------------------------
    # 单步
    # ------------------------------------------------------------------

    def extract_hr_semantics(self, hr: Tensor) -> Tensor:
        """S_h = φ(I_h)，每步调用一次"""
        self.semantic_calls += 1
        return self.extractor.extract(hr).data

    def _lr_semantics(self, lr: Tensor) -> Optional[Tensor]:
        if not self.generator.is_semantic:
            return None
        return lr_semantics(lr, self.extractor).data

    def train_step(self, batch: PairBatch) -> Dict[str, float]:
        """执行一步优化并返回损失记录"""
        lr, hr = batch.lr.to(self.device), batch.hr.to(self.device)
        record: Dict[str, float] = {c: 0.0 for c in CSV_COLUMNS}
        record["step"] = self.step + 1
        self._failure_context = {}
        try:
            if self.phase == PHASE_PSNR:
                self._psnr_step(lr, hr, record)
            else:
                self._gan_step(lr, hr, record)
        except NumericalError as e:
            record.update({k: v for k, v in e.record.items() if isinstance(v, (int, float))})
            record.update(self._failure_context)
            self._diverged(record)
            raise NumericalError(str(e), record) from e

        if not all(math.isfinite(v) for v in record.values()):
            self._diverged(record)
            raise NumericalError(f"第 {record['step']} 步出现非有限损失", record)

        for scheduler in (self.scheduler_g, self.scheduler_d):
            if scheduler is not None:
                scheduler.step()
        self.step += 1
        return record

    def _psnr_step(self, lr: Tensor, hr: Tensor, record: Dict[str, float]):
        self.generator.train()
        self.optimizer_g.zero_grad(set_to_none=True)
        sr = self.generator(lr, self._lr_semantics(lr))
        loss = pixel_loss(sr, hr, self.settings.loss.pixel_criterion)
        loss.backward()
        record["l_pixel"] = float(loss.detach())
        record["grad_norm_g"] = _grad_norm(self.generator.parameters())
        if math.isfinite(record["l_pixel"]):
            self.optimizer_g.step()

    def _gan_step(self, lr: Tensor, hr: Tensor, record: Dict[str, float]):
        s = self.settings
        g, d = self.generator, self.discriminator
        g.train()
        d.train()

        semantics = self.extract_hr_semantics(hr) if d.is_semantic else None
        fake = g(lr, self._lr_semantics(lr))
        record["l_pixel"] = float(pixel_loss(fake.detach(), hr, s.loss.pixel_criterion))

        # 判别器更新：生成器输出截断梯度
        self.optimizer_g.zero_grad(set_to_none=True)
        d.requires_grad_(True)
        for _ in range(s.train.d_steps):
            self.optimizer_d.zero_grad(set_to_none=True)
            real_logits = discriminate(d, hr, semantics)
            fake_logits = discriminate(d, fake.detach(), semantics)
            self._note_logits("l_d", real_logits, fake_logits)
            l_d = discriminator_loss(real_logits, fake_logits, s.loss.gan_mode)
            l_d.backward()
            record["l_d"] = float(l_d.detach())
            record["grad_norm_d"] = _grad_norm(d.parameters())
            if self.check_partition:
                self.last_partition["generator_grad_in_d_update"] = _has_grad(g)
            self.optimizer_d.step()

        # 生成器更新：判别器参数冻结
        self.optimizer_d.zero_grad(set_to_none=True)
        d.requires_grad_(False)
        try:
            self.optimizer_g.zero_grad(set_to_none=True)
            fake_logits_g = real_logits_g = None
            if self.weights.lambda_adversarial > 0:
                fake_logits_g = discriminate(d, fake, semantics)
                if s.loss.gan_mode == "literal_paper":
                    real_logits_g = discriminate(d, hr, semantics)
                self._note_logits("l_adv_g", real_logits_g, fake_logits_g)
            losses = generator_total_loss(fake, hr, fake_logits_g, self.weights, self.adapter,
                                          s.loss.pixel_criterion, s.loss.gan_mode, real_logits_g)
            losses.total.backward()
            if self.check_partition:
                self.last_partition["discriminator_grad_in_g_update"] = _has_grad(d)
            record.update({k: v for k, v in losses.as_floats().items() if k in record})
            record["grad_norm_g"] = _grad_norm(g.parameters())
            if math.isfinite(float(losses.total.detach())):
                self.optimizer_g.step()
        finally:
            d.requires_grad_(True)

    def _note_logits(self, loss_name: str, real_logits: Optional[Tensor], fake_logits: Optional[Tensor]):
        """记录本步最近一次判别器输出的统计量，只在发散记录中使用"""
        for name, logits in (("real", real_logits), ("fake", fake_logits)):
            if logits is None:
                continue
            logits = logits.detach()
            finite = torch.isfinite(logits)
            self._failure_context[f"{name}_logits_mean"] = float(logits.mean())
            self._failure_context[f"{name}_logits_nonfinite"] = float((~finite).sum())
            if not bool(finite.all()):
                self._failure_context[loss_name] = float("nan")

    def _diverged(self, record: Dict[str, float]):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "divergence.json"
        path.write_text(json.dumps({k: repr(v) if isinstance(v, float) else v for k, v in record.items()},
                                   indent=2), encoding="utf-8")
        self.state().save(self.out_dir / "divergence_state.pt")
        self._logger.error(f"训练发散，诊断记录已写入 {path}")
        self.publish_event(EventType.ERROR_OCCURRED, {"step": record.get("step"), "record": str(path)})

    # ------------------------------------------------------------------
    # 状态
    # ------------------------------------------------------------------

    @property
    def tag(self) -> str:
        return self.phase

    def state(self) -> TrainState:
        d = self.discriminator
        return TrainState(
            step=self.step,
            tag=self.tag,
            generator={k: v.detach().cpu().clone() for k, v in self.generator.state_dict().items()},
            generator_spec=self.generator.spec.to_dict(),
            optimizer_g=self.optimizer_g.state_dict(),
            scheduler_g=self.scheduler_g.state_dict() if self.scheduler_g else None,
            discriminator={k: v.detach().cpu().clone() for k, v in d.state_dict().items()} if d else None,
            discriminator_family=d.spec.family if d else "",
            optimizer_d=self.optimizer_d.state_dict() if self.optimizer_d else None,
            scheduler_d=self.scheduler_d.state_dict() if self.scheduler_d else None,
            rng=capture_rng(),
            settings=self.settings.to_params(),
        )

    def load_state(self, state: TrainState):
        if state.tag != self.tag:
            raise ConfigurationError(f"训练状态阶段不一致: {state.tag} != {self.tag}")
        if GeneratorSpec.from_dict(state.generator_spec) != self.generator.spec:
            raise ConfigurationError("训练状态的生成器规格与配置不一致")
        self.generator.load_state_dict(state.generator)
        self.optimizer_g.load_state_dict(state.optimizer_g)
        if self.scheduler_g is not None and state.scheduler_g is not None:
            self.scheduler_g.load_state_dict(state.scheduler_g)
        if self.discriminator is not None:
            if state.discriminator is None or state.discriminator_family != self.discriminator.spec.family:
                raise ConfigurationError("训练状态的判别器与配置不一致")
            self.discriminator.load_state_dict(state.discriminator)
            self.optimizer_d.load_state_dict(state.optimizer_d)
            if self.scheduler_d is not None and state.scheduler_d is not None:
                self.scheduler_d.load_state_dict(state.scheduler_d)
        restore_rng(state.rng)
        self.step = state.step
        self._logger.info(f"已从第 {state.step} 步恢复训练")

    def save_checkpoint(self, final: bool = False) -> Path:
        suffix = "" if final else f"_{self.step:07d}"
        self.state().save(self.out_dir / f"state{suffix}.pt")
        path = save_generator(self.out_dir / f"generator_{self.tag}{suffix}.pt",
                              self.generator, self.tag, self.step, self.settings)
        self.publish_event(EventType.CHECKPOINT_SAVED, {"step": self.step, "path": str(path)})
        return path

    # ------------------------------------------------------------------
    # 训练循环
    # ------------------------------------------------------------------

    def _restore_loss_log(self, csv_path: Path) -> bool:
        """续训时把 losses.csv 截断到当前步，并用保留的行重建 history

        Returns:
            bool: 是否沿用已有文件（False 时调用方重新写表头）
        """
        if self.step == 0 or not csv_path.exists():
            return False
        with open(csv_path, newline="", encoding="utf-8") as f:
            rows = [row for row in csv.DictReader(f) if int(row["step"]) <= self.step]
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow([row[c] for c in CSV_COLUMNS])

        self.history = {c: [] for c in CSV_COLUMNS}
        for row in rows:
            self.history["step"].append(int(row["step"]))
            for column in CSV_COLUMNS[1:]:
                self.history[column].append(float(row[column]))
        if len(rows) < self.step:
            self._logger.warning(f"losses.csv 只有 {len(rows)} 行不晚于第 {self.step} 步的记录")
        return True

    def run(self, iterations: Optional[int] = None, resume_from: Optional[Union[str, Path]] = None) -> Path:
        """训练到 iterations 步（默认 train.iterations），返回最终生成器检查点路径"""
        if not self.initialize():
            raise self.last_error() or ConfigurationError("训练模块初始化失败")
        if resume_from is not None:
            self.load_state(TrainState.load(resume_from))
        self.start()

        s = self.settings.train
        total = s.iterations if iterations is None else iterations
        remaining = max(total - self.step, 0)
        csv_path = self.out_dir / "losses.csv"
        new_file = not self._restore_loss_log(csv_path)
        self._logger.info(f"{self.phase} 训练: 第 {self.step} 步 -> 第 {total} 步")

        with open(csv_path, "w" if new_file else "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(CSV_COLUMNS)
            loader = batch_loader(self.sampler, s.batch_size, self.step, remaining, self.settings.data.num_workers)
            for batch in loader:
                if self._stop_requested:
                    self._logger.info(f"训练在第 {self.step} 步被停止")
                    break
                record = self.train_step(batch)
                writer.writerow([int(record["step"])] + [repr(float(record[c])) for c in CSV_COLUMNS[1:]])
                for column in CSV_COLUMNS:
                    self.history[column].append(record[column])
                if self.step % s.log_interval == 0:
                    self._logger.info(
                        f"step {self.step}: l_pixel={record['l_pixel']:.5f} l_perceptual={record['l_perceptual']:.5f} "
                        f"l_adv_g={record['l_adv_g']:.5f} l_d={record['l_d']:.5f}")
                    self.publish_event(EventType.STEP_COMPLETED, dict(record))
                if self.step % s.checkpoint_interval == 0 and self.step < total:
                    self.save_checkpoint()

        path = self.save_checkpoint(final=True)
        self.stop()
        self.publish_event(EventType.RUN_COMPLETED, {"phase": self.phase, "step": self.step, "generator": str(path)})
        return path

    def plot_curves(self) -> Optional[Path]:
        if not self.history["step"]:
            return None
        return ResultPlotter.plot_loss_curves(self.history, self.out_dir / "loss_curves.png", title=self.phase)


def pretrain_psnr(settings: ExperimentSettings, out_dir: Union[str, Path], iterations: Optional[int] = None,
                  resume_from: Optional[Union[str, Path]] = None, device: str = "cpu") -> Path:
    """仅 L1 的生成器预训练，返回标记为 psnr 的生成器检查点"""
    module = TrainingModule(settings, out_dir, phase=PHASE_PSNR, device=device)
    try:
        path = module.run(iterations, resume_from)
        if settings.train.plot_curves:
            module.plot_curves()
        return path
    finally:
        module.destroy()


def run_experiment(settings: ExperimentSettings, out_dir: Union[str, Path],
                   resume_from: Optional[Union[str, Path]] = None, device: str = "cpu",
                   extras: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """GAN 训练 + 留出集评估，写出 summary.json 并返回摘要"""
    settings = settings.validate()
    if settings.train.init == "psnr" and not settings.train.psnr_checkpoint:
        raise ConfigurationError("train.init=psnr 需要 train.psnr_checkpoint")
    out_dir = Path(out_dir)
    module = TrainingModule(settings, out_dir, phase=PHASE_GAN, device=device)
    try:
        generator_path = module.run(resume_from=resume_from)
        if settings.train.plot_curves:
            module.plot_curves()

        summary: Dict[str, Any] = {
            "steps": module.step,
            "generator": str(generator_path),
            "final": {c: module.history[c][-1] for c in CSV_COLUMNS[1:]} if module.history["step"] else {},
            "semantic_calls": module.semantic_calls,
            "settings": {k: list(v) if isinstance(v, tuple) else v for k, v in settings.to_params().items()},
        }
        if settings.train.eval_images > 0:
            pairs = held_out_pairs(settings, settings.train.eval_images)
            report = evaluate_pairs(module.generator.cpu(), pairs, MetricConvention(),
                                    extractor=module.extractor.cpu() if module.extractor else None,
                                    dataset_id="held_out_synthetic", checkpoint_id=generator_path.name)
            aggregate = report.aggregate()
            summary["psnr"] = aggregate.get("psnr")
            summary["ssim"] = aggregate.get("ssim")
            if module.discriminator is not None and module.discriminator.is_semantic and module.extractor is not None:
                hr = pairs[0].hr[None]
                energy = semantic_energy(module.extractor.extract(hr))[0].numpy()
                ResultPlotter.save_semantic_heatmap(ImageProcessor.to_numpy(hr), energy, out_dir / "semantics.png")
        summary.update(extras or {})
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, ensure_ascii=False), encoding="utf-8")
        module.publish_event(EventType.EVALUATION_COMPLETED, summary)
        return summary
    finally:
        module.destroy()


def run_ablation(settings: ExperimentSettings, axis: str, out_dir: Union[str, Path],
                 values: Optional[Sequence[Any]] = None, device: str = "cpu") -> List[Path]:
    """沿一个配置轴扫描，每个取值一个 ``<axis>=<value>`` 运行目录

    extractor.kind 轴上未配置权重的骨干以按类型播种的玩具提取器代替，并在摘要中标记
    """
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"未知的消融轴: {axis}，可选 {sorted(ABLATION_AXES)}")
    values = tuple(values) if values is not None else ABLATION_AXES[axis]
    out_dir = Path(out_dir)
    run_dirs = []
    rows = []
    for index, value in enumerate(values):
        run_settings = settings.with_overrides({axis: value})
        extras: Dict[str, Any] = {"axis": axis, "value": value}
        if axis == "extractor.kind" and not run_settings.extractor.weights_path:
            run_settings = run_settings.with_overrides({
                "extractor.kind": "toy",
                "extractor.seed": settings.extractor_seed() + index + 1,
            })
            extras["substituted_extractor"] = "toy"
        run_dir = out_dir / f"{axis}={value}"
        summary = run_experiment(run_settings, run_dir, device=device, extras=extras)
        run_dirs.append(run_dir)
        rows.append([value, summary.get("psnr"), summary.get("ssim"),
                     summary["final"].get("l_pixel"), summary["final"].get("l_d")])

    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([axis, "psnr", "ssim", "l_pixel", "l_d"])
        writer.writerows(rows)
    return run_dirs
