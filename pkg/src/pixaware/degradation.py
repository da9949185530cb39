"""Seeded high-order LQ synthesis and HQ pyramid targets.

Images are ``uint8`` arrays of shape (H, W, 3). Every stage works on float64
in the [0, 255] range and only the final LQ is rounded back to ``uint8``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import fft as sfft
from scipy.ndimage import correlate1d

RESAMPLE_FILTERS = ("bicubic", "bilinear", "area")

# Standard JPEG luminance quantisation table (ITU T.81, Annex K).
LUMA_QTABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class DegradationConfig:
    blur_sigma_range: tuple = (0.2, 1.5)
    downscale_range: tuple = (1.0, 2.0)
    noise_sigma_range: tuple = (1.0, 10.0)
    compression_quality_range: tuple = (60, 95)
    second_order_prob: float = 0.5
    resample_filters: tuple = RESAMPLE_FILTERS

    def __post_init__(self):
        for name in ("blur_sigma_range", "downscale_range", "noise_sigma_range", "compression_quality_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo={lo} > hi={hi}")
            if lo < 0:
                raise ValueError(f"{name}: negative bound")
        if self.downscale_range[0] < 1:
            raise ValueError("downscale factors must be >= 1")
        qlo, qhi = self.compression_quality_range
        if not (1 <= qlo and qhi <= 100):
            raise ValueError("compression quality must lie in [1, 100]")
        if not 0.0 <= self.second_order_prob <= 1.0:
            raise ValueError("second_order_prob must lie in [0, 1]")
        bad = set(self.resample_filters) - set(RESAMPLE_FILTERS)
        if bad or not self.resample_filters:
            raise ValueError(f"unknown resample filters {sorted(bad)}")

    @classmethod
    def identity(cls) -> "DegradationConfig":
        return cls(
            blur_sigma_range=(0.0, 0.0),
            downscale_range=(1.0, 1.0),
            noise_sigma_range=(0.0, 0.0),
            compression_quality_range=(100, 100),
            second_order_prob=0.0,
            resample_filters=("bicubic",),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ImagePair:
    hq: np.ndarray
    lq: np.ndarray
    recipe: dict
    tags: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# primitives


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img.astype(np.float64, copy=True)
    k = gaussian_kernel1d(sigma)
    out = correlate1d(img.astype(np.float64), k, axis=0, mode="reflect")
    return correlate1d(out, k, axis=1, mode="reflect")


def resize(img: np.ndarray, size: tuple, method: str = "bicubic") -> np.ndarray:
    """Resize an (H, W, C) float image to ``size = (h, w)``."""
    x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    y = resize_tensor(x, size, method)
    return y[0].permute(1, 2, 0).numpy()


def resize_tensor(x: torch.Tensor, size: tuple, method: str = "bicubic") -> torch.Tensor:
    size = (int(size[0]), int(size[1]))
    if tuple(x.shape[-2:]) == size:
        return x.clone()
    if method == "area":
        return F.interpolate(x, size=size, mode="area")
    if method not in ("bicubic", "bilinear"):
        raise ValueError(f"unknown resample method {method!r}")
    # antialias=True selects the separable PIL-style kernels (a=-0.5) in both directions
    return F.interpolate(x, size=size, mode=method, align_corners=False, antialias=True)


def quality_table(quality: int) -> np.ndarray:
    quality = int(np.clip(quality, 1, 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((LUMA_QTABLE * scale + 50) / 100), 1, 255)


def block_dct_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block-DCT quantisation round trip applied to each channel."""
    h, w, c = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge") - 128.0
    H, W = x.shape[:2]
    blocks = x.reshape(H // 8, 8, W // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coef = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
    q = quality_table(quality)
    coef = np.round(coef / q) * q
    blocks = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    out = blocks.transpose(0, 3, 1, 4, 2).reshape(H, W, c) + 128.0
    return np.clip(out[:h, :w], 0.0, 255.0)


# ---------------------------------------------------------------------------
# pipeline


def _uniform(rng: np.random.Generator, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def sample_recipe(cfg: DegradationConfig, rng: np.random.Generator) -> dict:
    """Draw the concrete parameters of one (possibly two-round) degradation."""

    def one_round() -> dict:
        qlo, qhi = cfg.compression_quality_range
        return {
            "blur_sigma": _uniform(rng, cfg.blur_sigma_range),
            "downscale": _uniform(rng, cfg.downscale_range),
            "resample": str(cfg.resample_filters[int(rng.integers(len(cfg.resample_filters)))]),
            "noise_sigma": _uniform(rng, cfg.noise_sigma_range),
            "quality": int(rng.integers(qlo, qhi + 1)),
        }

    rounds = [one_round()]
    if rng.uniform() < cfg.second_order_prob:
        rounds.append(one_round())
    return {"rounds": rounds, "upsample": "bicubic"}


def apply_recipe(hq: np.ndarray, recipe: dict, rng: np.random.Generator) -> np.ndarray:
    h, w = hq.shape[:2]
    x = hq.astype(np.float64)
    for r in recipe["rounds"]:
        x = gaussian_blur(x, r["blur_sigma"])
        if r["downscale"] > 1.0:
            size = (max(2, round(x.shape[0] / r["downscale"])), max(2, round(x.shape[1] / r["downscale"])))
            x = resize(x, size, r["resample"])
        if r["noise_sigma"] > 0:
            x = x + rng.normal(0.0, r["noise_sigma"], size=x.shape)
        x = np.clip(x, 0.0, 255.0)
        x = block_dct_compress(x, r["quality"])
    x = resize(x, (h, w), recipe["upsample"])
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def degrade(hq: np.ndarray, cfg: DegradationConfig, rng: np.random.Generator, tags=None) -> ImagePair:
    if hq.ndim != 3 or hq.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {hq.shape}")
    h, w = hq.shape[:2]
    if h < 8 or w < 8:
        raise ValueError(f"image too small: {h}x{w}")
    if h % 8 or w % 8:
        raise ValueError(f"image size {h}x{w} must be divisible by 8")
    recipe = sample_recipe(cfg, rng)
    lq = apply_recipe(hq, recipe, rng)
    return ImagePair(hq=hq, lq=lq, recipe=recipe, tags=list(tags or []))


def recipe_to_kv(recipe: dict) -> str:
    parts = []
    for i, r in enumerate(recipe["rounds"], start=1):
        for k, v in r.items():
            parts.append(f"r{i}.{k}={v:.6g}" if isinstance(v, float) else f"r{i}.{k}={v}")
    parts.append(f"upsample={recipe['upsample']}")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# pyramid

DEFAULT_SCALES = (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))


def _scaled_size(h: int, w: int, s) -> tuple:
    s = Fraction(s).limit_denominator(1024)
    sh, sw = h * s, w * s
    if sh.denominator != 1 or sw.denominator != 1:
        raise ValueError(f"scale {s} does not divide {h}x{w}")
    return int(sh), int(sw)


def pyramid_decompose(img, scales: Sequence = DEFAULT_SCALES) -> list:
    """Bicubic-downsampled copies of ``img`` at each scale, in the order given.

    Accepts an (H, W, C) numpy array or a (B, C, H, W) tensor and returns the
    same kind (numpy outputs are float64).
    """
    if isinstance(img, torch.Tensor):
        h, w = img.shape[-2:]
        return [resize_tensor(img, _scaled_size(h, w, s), "bicubic") for s in scales]
    h, w = img.shape[:2]
    return [resize(img, _scaled_size(h, w, s), "bicubic") for s in scales]
