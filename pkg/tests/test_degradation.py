from fractions import Fraction

import numpy as np
import pytest
import torch
from PIL import Image

from pixaware.degradation import (
    DegradationConfig,
    block_dct_compress,
    degrade,
    gaussian_kernel1d,
    pyramid_decompose,
    recipe_to_kv,
    resize,
)
from pixaware.evaluation import psnr_y


@pytest.fixture
def hq():
    rng = np.random.default_rng(0)
    base = rng.integers(0, 256, (4, 4, 3))
    return np.kron(base, np.ones((8, 8, 1))).astype(np.uint8)


def pil_resize(channel: np.ndarray, size, method=Image.BICUBIC):
    """Independent resampler: PIL's float-mode filter."""
    im = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(im.resize((size[1], size[0]), method), dtype=np.float64)


def test_identity_config_round_trip(hq):
    for seed in range(5):
        pair = degrade(hq, DegradationConfig.identity(), np.random.default_rng(seed))
        assert pair.lq.shape == hq.shape
        assert np.abs(pair.lq.astype(int) - hq.astype(int)).max() <= 2


def test_identity_on_random_texture():
    img = np.random.default_rng(4).integers(0, 256, (32, 32, 3)).astype(np.uint8)
    pair = degrade(img, DegradationConfig.identity(), np.random.default_rng(0))
    assert np.abs(pair.lq.astype(int) - img.astype(int)).max() <= 2


def test_determinism(hq):
    cfg = DegradationConfig(second_order_prob=1.0)
    a = degrade(hq, cfg, np.random.default_rng(42))
    b = degrade(hq, cfg, np.random.default_rng(42))
    assert a.lq.tobytes() == b.lq.tobytes()
    assert a.recipe == b.recipe
    c = degrade(hq, cfg, np.random.default_rng(43))
    assert c.lq.tobytes() != a.lq.tobytes()


def test_second_order_recipe():
    img = np.zeros((16, 16, 3), np.uint8)
    assert len(degrade(img, DegradationConfig(second_order_prob=1.0), np.random.default_rng(0)).recipe["rounds"]) == 2
    assert len(degrade(img, DegradationConfig(second_order_prob=0.0), np.random.default_rng(0)).recipe["rounds"]) == 1
    kv = recipe_to_kv(degrade(img, DegradationConfig(second_order_prob=1.0), np.random.default_rng(0)).recipe)
    assert "r2.quality=" in kv and "upsample=bicubic" in kv


def test_area_downsample_checkerboard():
    yy, xx = np.mgrid[0:8, 0:8]
    board = ((xx + yy) % 2 * 255).astype(np.float64)
    img = np.repeat(board[..., None], 3, axis=2)
    out = resize(img, (4, 4), "area")
    # every 2x2 cell holds two 0s and two 255s
    np.testing.assert_allclose(out, 127.5, atol=1e-12)


def test_resize_matches_pil():
    x = np.random.default_rng(1).uniform(0, 255, (32, 32))
    for size in [(16, 16), (11, 13), (64, 64)]:
        ours = resize(x[..., None], size)[..., 0]
        np.testing.assert_allclose(ours, pil_resize(x, size), atol=1e-3)
    ours = resize(x[..., None], (16, 16), "bilinear")[..., 0]
    np.testing.assert_allclose(ours, pil_resize(x, (16, 16), Image.BILINEAR), atol=1e-3)


def test_gaussian_kernel_truncated_and_normalised():
    k = gaussian_kernel1d(1.0)
    assert len(k) == 9 and k.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.argmax(k) == 4


def test_compression_quality_100_small_error():
    img = np.random.default_rng(2).uniform(0, 255, (16, 16, 3))
    out = block_dct_compress(img, 100)
    assert np.abs(out - img).max() < 2.0
    coarse = block_dct_compress(img, 10)
    assert np.abs(coarse - img).mean() > np.abs(out - img).mean()


def test_noise_monotonically_lowers_psnr(hq):
    means = []
    for sigma in (2.0, 8.0, 20.0):
        cfg = DegradationConfig(
            blur_sigma_range=(0, 0),
            downscale_range=(1, 1),
            noise_sigma_range=(sigma, sigma),
            compression_quality_range=(100, 100),
            second_order_prob=0.0,
        )
        means.append(np.mean([psnr_y(degrade(hq, cfg, np.random.default_rng(s)).lq, hq) for s in range(20)]))
    assert means[0] > means[1] > means[2]


@pytest.mark.parametrize(
    "kwargs",
    [
        {"blur_sigma_range": (2, 1)},
        {"downscale_range": (0.5, 2)},
        {"compression_quality_range": (0, 90)},
        {"second_order_prob": 1.5},
        {"resample_filters": ("lanczos",)},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        DegradationConfig(**kwargs)


def test_degrade_rejects_bad_sizes():
    with pytest.raises(ValueError):
        degrade(np.zeros((4, 4, 3), np.uint8), DegradationConfig(), np.random.default_rng())
    with pytest.raises(ValueError):
        degrade(np.zeros((12, 16, 3), np.uint8), DegradationConfig(), np.random.default_rng())


def test_pyramid_constant_and_shapes():
    img = np.full((64, 64, 3), 77.0)
    outs = pyramid_decompose(img)
    assert [o.shape for o in outs] == [(32, 32, 3), (16, 16, 3), (8, 8, 3)]
    for o in outs:
        np.testing.assert_allclose(o, 77.0, atol=1e-9)


def test_pyramid_ramp_against_brute_force_filter():
    ramp = np.tile(np.linspace(0, 255, 32), (32, 1))
    out = pyramid_decompose(ramp[..., None], [Fraction(1, 2)])[0][..., 0]
    expected = pil_resize(ramp, (16, 16))
    np.testing.assert_allclose(out, expected, atol=1e-3)
    # a linear ramp keeps its mean and is still monotone across the row
    assert out.mean() == pytest.approx(ramp.mean(), abs=1.0)
    assert np.all(np.diff(out[0]) > 0)


def test_pyramid_preserves_mean_for_band_limited_input():
    yy, xx = np.mgrid[0:64, 0:64]
    img = 128 + 40 * np.sin(2 * np.pi * xx / 32) * np.cos(2 * np.pi * yy / 64)
    for o in pyramid_decompose(img[..., None]):
        assert abs(o.mean() - img.mean()) < 1.0


def test_pyramid_tensor_input_and_errors():
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64)
    outs = pyramid_decompose(x)
    assert [tuple(o.shape) for o in outs] == [(2, 3, 16, 16), (2, 3, 8, 8), (2, 3, 4, 4)]
    with pytest.raises(ValueError):
        pyramid_decompose(np.zeros((20, 20, 3)), [Fraction(1, 8)])
