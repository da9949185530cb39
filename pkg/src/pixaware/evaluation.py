"""Y-channel fidelity metrics and the alpha_bar_a sweep."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import spearmanr

from .images import to_tensor, to_uint8
from .schedules import AnsConfig

PSNR_CAP = 99.0
CSV_FIELDS = ("image_id", "alpha_bar_a", "psnr_y", "ssim", "sharpness")


@dataclass
class MetricRecord:
    image_id: str
    alpha_bar_a: float
    psnr_y: float
    ssim: float
    sharpness_proxy: float


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB on the luma channel of two [0, 255] RGB images."""
    _check(a, b)
    mse = float(np.mean((rgb_to_y(a) - rgb_to_y(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(255.0**2 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, k1=0.01, k2=0.03, L=255.0) -> float:
    """Mean SSIM of the luma channels over all fully-covered window positions."""
    _check(a, b)
    x, y = rgb_to_y(a), rgb_to_y(b)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    w = _gaussian_window(window, sigma)

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (window, window)), w)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
    return float(s.mean())


def sharpness(img: np.ndarray) -> float:
    """Mean luma gradient magnitude (forward differences)."""
    y = rgb_to_y(img)
    gx = np.diff(y, axis=1)[:-1, :]
    gy = np.diff(y, axis=0)[:, :-1]
    return float(np.mean(np.hypot(gx, gy)))


def evaluate(image_id: str, restored: np.ndarray, hq: np.ndarray, alpha_bar_a: float = float("nan")) -> MetricRecord:
    return MetricRecord(image_id, float(alpha_bar_a), psnr_y(restored, hq), ssim(restored, hq), sharpness(restored))


def sweep_alpha_a(
    restore,
    pairs: Sequence,
    values: Sequence[float] = (0.0, 0.1, 0.5, 1.0),
    sampler=None,
    seed: int = 0,
    batch_size: int = 16,
    csv_path=None,
) -> List[MetricRecord]:
    """Restore every pair at each ``alpha_bar_a`` with a fixed seed and score it.

    ``restore(lq_tensor, tags, sampler_config, rng)`` returns images in [-1, 1];
    ``sampler`` is the base SamplerConfig whose ``ans`` field is overridden.
    """
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"alpha_bar_a={v} outside [0, 1]")
    records = []
    for v in values:
        sc = replace(sampler, ans=AnsConfig(alpha_bar_a=float(v)), seed=seed)
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            rng = torch.Generator().manual_seed(seed + start)
            out = to_uint8(restore(to_tensor([p.lq for p in chunk]), [p.tags for p in chunk], sc, rng))
            for j, (p, img) in enumerate(zip(chunk, out)):
                records.append(evaluate(f"{start + j:05d}", img, p.hq, v))
    if csv_path is not None:
        write_csv(records, csv_path)
    return records


def write_csv(records: Sequence[MetricRecord], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.image_id, repr(r.alpha_bar_a), f"{r.psnr_y:.6f}", f"{r.ssim:.6f}", f"{r.sharpness_proxy:.6f}"])


def read_csv(path) -> List[MetricRecord]:
    with open(path, newline="") as fh:
        return [
            MetricRecord(r["image_id"], float(r["alpha_bar_a"]), float(r["psnr_y"]), float(r["ssim"]), float(r["sharpness"]))
            for r in csv.DictReader(fh)
        ]


def summarize(records: Sequence[MetricRecord]) -> dict:
    """Per-alpha means, keyed by alpha_bar_a in first-seen order."""
    out = {}
    for r in records:
        out.setdefault(r.alpha_bar_a, []).append(r)
    return {
        a: {
            "psnr_y": float(np.mean([r.psnr_y for r in rs])),
            "ssim": float(np.mean([r.ssim for r in rs])),
            "sharpness": float(np.mean([r.sharpness_proxy for r in rs])),
        }
        for a, rs in out.items()
    }


def trend(records: Sequence[MetricRecord]) -> dict:
    """Spearman correlation of alpha_bar_a against mean PSNR, and sharpness steps."""
    summary = summarize(records)
    alphas = sorted(summary)
    psnrs = [summary[a]["psnr_y"] for a in alphas]
    sharp = [summary[a]["sharpness"] for a in alphas]
    rho = float(spearmanr(alphas, psnrs).correlation)
    return {
        "alphas": alphas,
        "psnr": psnrs,
        "sharpness": sharp,
        "spearman": rho,
        "sharpness_nonincreasing_steps": int(sum(b <= a for a, b in zip(sharp, sharp[1:]))),
    }


def record_dict(r: MetricRecord) -> dict:
    return asdict(r)
