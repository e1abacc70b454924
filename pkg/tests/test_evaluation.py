"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.
"""

import json

import numpy as np
import pytest
import torch

from sedsr.core.checkpoints import save_generator
from sedsr.core.data import synth_dataset
from sedsr.core.discriminators import DiscriminatorSpec, build_discriminator
from sedsr.core.evaluation import (
    PSNR_CAP, UNAVAILABLE, CallableAdapter, EvaluationModule, MetricConvention, PyiqaAdapter, build_adapter,
    evaluate_pairs, export_discriminator_features, psnr, ssim,
)
from sedsr.core.exceptions import ConfigurationError, ContractError, ShapeError
from sedsr.core.generators import GeneratorSpec, build_generator

RGB = MetricConvention(color="rgb", crop_border=0)


@pytest.fixture
def generator():
    torch.manual_seed(0)
    return build_generator(GeneratorSpec(num_rrdb_blocks=1, feature_channels=8, growth_channels=4))


@pytest.fixture
def pairs():
    dataset = synth_dataset(seed=21, n_images=2, hr_size=64)
    return [dataset.full_pair(i) for i in range(len(dataset))]


def test_psnr_identical_is_capped():
    image = torch.rand(2, 3, 32, 32)
    assert np.all(psnr(image, image) == PSNR_CAP)


def test_psnr_zero_db():
    assert psnr(torch.zeros(3, 16, 16), torch.ones(3, 16, 16), RGB)[0] == pytest.approx(0.0)


def test_psnr_oracle():
    a = np.full((3, 16, 16), 0.5)
    b = np.full((3, 16, 16), 0.6)
    assert psnr(a, b, RGB)[0] == pytest.approx(20.0)
    # Y 通道上常数偏移按 219/255 缩放
    expected = 20.0 - 20.0 * np.log10(219.0 / 255.0)
    assert psnr(a, b)[0] == pytest.approx(expected)


def test_psnr_border_crop():
    a = np.zeros((1, 16, 16))
    b = a.copy()
    b[:, :4, :] = 1.0
    assert psnr(a, b, MetricConvention("rgb", 4))[0] == PSNR_CAP
    assert psnr(a, b, RGB)[0] < PSNR_CAP


def y_channel(image):
    """BT.601 亮度，[0,1] 输入"""
    r, g, b = image[0], image[1], image[2]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def reference_ssim(x, y):
    """逐窗口计算的高斯加权 SSIM，只统计窗口完全落在图内的位置"""
    coords = np.arange(11) - 5
    g = np.exp(-(coords[:, None] ** 2 + coords[None, :] ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    wx = np.lib.stride_tricks.sliding_window_view(x, (11, 11))
    wy = np.lib.stride_tricks.sliding_window_view(y, (11, 11))
    mu_x = (wx * g).sum(axis=(-2, -1))
    mu_y = (wy * g).sum(axis=(-2, -1))
    var_x = (wx ** 2 * g).sum(axis=(-2, -1)) - mu_x ** 2
    var_y = (wy ** 2 * g).sum(axis=(-2, -1)) - mu_y ** 2
    cov = (wx * wy * g).sum(axis=(-2, -1)) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return ssim_map.mean()


def random_pair(seed, size=32):
    rng = np.random.default_rng(seed)
    a = rng.random((3, size, size))
    b = np.clip(a + rng.normal(0.0, 0.1, a.shape), 0.0, 1.0)
    return a, b


@pytest.mark.parametrize("seed", range(20))
def test_ssim_matches_windowed_reference(seed):
    a, b = random_pair(seed)
    expected = reference_ssim(y_channel(a)[4:-4, 4:-4], y_channel(b)[4:-4, 4:-4])
    assert abs(float(ssim(a, b)[0]) - expected) < 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_psnr_matches_mse_formula_on_y(seed):
    a, b = random_pair(seed)
    diff = (y_channel(a) - y_channel(b))[4:-4, 4:-4]
    expected = 10.0 * np.log10(1.0 / np.mean(diff ** 2))
    assert float(psnr(a, b)[0]) == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("shift", [(1, 0), (0, 5), (7, 3)])
def test_psnr_invariant_to_joint_translation(shift):
    """两幅图做相同的循环平移，PSNR 不变"""
    a, b = random_pair(3)
    convention = MetricConvention(color="y", crop_border=0)
    shifted = psnr(np.roll(a, shift, axis=(1, 2)), np.roll(b, shift, axis=(1, 2)), convention)
    assert float(shifted[0]) == pytest.approx(float(psnr(a, b, convention)[0]), abs=1e-10)


def test_metric_contracts():
    with pytest.raises(ContractError):
        psnr(torch.rand(3, 16, 16), torch.rand(3, 16, 12))
    with pytest.raises(ShapeError):
        psnr(torch.rand(3, 8, 8), torch.rand(3, 8, 8))
    with pytest.raises(TypeError):
        psnr([[0.0]], [[0.0]])
    with pytest.raises(ConfigurationError):
        MetricConvention(color="lab")


def test_ssim_identical_and_symmetric():
    gen = torch.Generator().manual_seed(2)
    a = torch.rand(2, 3, 40, 40, generator=gen)
    b = (a + 0.1 * torch.rand(2, 3, 40, 40, generator=gen)).clamp(0, 1)
    assert np.allclose(ssim(a, a), 1.0)
    assert np.allclose(ssim(a, b), ssim(b, a))
    assert np.all(ssim(a, b) < 1.0)
    with pytest.raises(ShapeError):
        ssim(torch.rand(3, 16, 16), torch.rand(3, 16, 16))


def test_report_marks_missing_adapters(generator, pairs, tmp_path):
    report = evaluate_pairs(generator, pairs, dataset_id="synth", checkpoint_id="ckpt")
    aggregate = report.aggregate()
    assert aggregate["lpips"] == UNAVAILABLE and aggregate["niqe"] == UNAVAILABLE
    assert len(report.per_image) == 2
    text = report.write_text(tmp_path / "report.txt").read_text(encoding="utf-8")
    assert "lpips: unavailable" in text
    assert "niqe: unavailable" in text
    assert text.count("synth21_") == 2


def test_adapters_are_called(generator, pairs):
    calls = []

    def fake_lpips(sr, hr):
        calls.append((sr.shape, hr.shape))
        return 0.25

    adapters = {
        "lpips": CallableAdapter("lpips", fake_lpips),
        "niqe": CallableAdapter("niqe", lambda sr: 3.0, no_reference=True),
    }
    aggregate = evaluate_pairs(generator, pairs, adapters=adapters).aggregate()
    assert aggregate["lpips"] == pytest.approx(0.25)
    assert aggregate["niqe"] == pytest.approx(3.0)
    assert calls[0] == ((1, 3, 64, 64), (1, 3, 64, 64))


def test_build_adapter(monkeypatch):
    assert build_adapter(None, "lpips") is None
    assert build_adapter("none", "lpips") is None
    with pytest.raises(ConfigurationError):
        build_adapter("bogus", "lpips")
    monkeypatch.setattr(PyiqaAdapter, "available", staticmethod(lambda: False))
    assert build_adapter("pyiqa", "niqe") is None


def test_report_json(generator, pairs, tmp_path):
    report = evaluate_pairs(generator, pairs, dataset_id="synth", checkpoint_id="ckpt")
    data = json.loads(report.write_json(tmp_path / "report.json").read_text(encoding="utf-8"))
    assert data["convention"] == {"color": "y", "crop_border": 4}
    assert data["aggregate"]["psnr"] == pytest.approx(np.mean([row["psnr"] for row in data["per_image"]]))


def test_feature_export(tmp_path):
    torch.manual_seed(0)
    disc = build_discriminator(DiscriminatorSpec(family="patch_sed", base_channels=8, image_size=32, heads=2))
    images = torch.rand(3, 3, 32, 32)
    semantics = torch.randn(3, 1024, 2, 2)
    labels = ["cat", "cat", "dog"]
    features = export_discriminator_features(disc, images, semantics, "sefb1", labels, tmp_path)
    assert features.shape[0] == 3
    saved = np.loadtxt(str(tmp_path / "features.txt"))
    assert saved.shape == features.shape
    assert (tmp_path / "labels.txt").read_text(encoding="utf-8").split() == labels
    assert disc.training

    with pytest.raises(ConfigurationError):
        export_discriminator_features(disc, images, semantics, "block9")
    with pytest.raises(ContractError):
        export_discriminator_features(disc, images, semantics, "sefb1", ["a"], tmp_path)


def test_evaluation_module_writes_report(generator, pairs, tmp_path):
    checkpoint = save_generator(tmp_path / "generator_gan.pt", generator, "gan", 7)
    module = EvaluationModule(checkpoint, tmp_path / "eval")
    assert module.initialize()
    report = module.evaluate(pairs, "synth")
    assert report.checkpoint_id == "generator_gan.pt:gan@7"
    assert (tmp_path / "eval" / "report.txt").is_file()
    assert (tmp_path / "eval" / "report.json").is_file()
    module.destroy()


def test_evaluation_module_builds_extractor_for_semantic_generator(tiny_settings, pairs, tmp_path):
    settings = tiny_settings.with_overrides({"gen.sefb_block_indices": "1"}).validate()
    generator = build_generator(settings)
    checkpoint = save_generator(tmp_path / "generator_gan.pt", generator, "gan", 0, settings)
    module = EvaluationModule(checkpoint, tmp_path / "eval")
    assert module.initialize()
    assert module.extractor is not None
    assert len(module.evaluate(pairs, "synth").per_image) == 2


def test_evaluation_module_requires_initialize(tmp_path, pairs):
    module = EvaluationModule(tmp_path / "missing.pt", tmp_path)
    assert not module.initialize()
    assert isinstance(module.last_error(), ConfigurationError)
    with pytest.raises(ConfigurationError):
        module.evaluate(pairs, "synth")
