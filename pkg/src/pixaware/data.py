"""Synthetic texture dataset with semantic labels, plus style transforms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .degradation import DegradationConfig, ImagePair, degrade, recipe_to_kv
from .images import read_png, write_png
from .seeding import derive_seed, numpy_rng

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 50),
    "cyan": (40, 200, 210),
    "magenta": (210, 50, 190),
    "orange": (240, 140, 30),
    "purple": (130, 60, 180),
    "white": (240, 240, 240),
    "black": (20, 20, 20),
    "gray": (128, 128, 128),
}
FAMILIES = ("stripes", "dots", "gradient", "checker", "noise-field")


@dataclass
class GeneratorConfig:
    n: int = 200
    size: int = 32
    proportions: Dict[str, float] = field(default_factory=lambda: {f: 1.0 / len(FAMILIES) for f in FAMILIES})

    def __post_init__(self):
        unknown = set(self.proportions) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown texture families {sorted(unknown)}")
        total = sum(self.proportions.values())
        if total <= 0:
            raise ValueError("proportions must sum to a positive value")
        if self.size % 8:
            raise ValueError("image size must be divisible by 8")


def _two_colors(rng):
    names = list(COLORS)
    a, b = rng.choice(len(names), size=2, replace=False)
    return names[a], names[b]


def _blend(mask: np.ndarray, c0, c1) -> np.ndarray:
    m = mask[..., None]
    return (1.0 - m) * np.asarray(c0, float) + m * np.asarray(c1, float)


def _scale_tag(period, split) -> str:
    return "fine" if period < split else "coarse"


def render(family: str, size: int, rng: np.random.Generator):
    """Render one texture; returns (uint8 image, tags)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0, c1 = _two_colors(rng)
    if family == "stripes":
        orient = ["horizontal", "vertical", "diagonal"][rng.integers(3)]
        period = float(rng.uniform(4, 12))
        coord = {"horizontal": yy, "vertical": xx, "diagonal": (xx + yy) / np.sqrt(2)}[orient]
        mask = (np.mod(coord + rng.uniform(0, period), period) < period / 2).astype(float)
        tags = [family, orient, _scale_tag(period, 7), c0, c1, "sharp"]
    elif family == "dots":
        spacing = float(rng.uniform(6, 12))
        radius = float(rng.uniform(1.5, min(4.0, spacing / 2.5)))
        ox, oy = rng.uniform(0, spacing, size=2)
        dx = np.mod(xx + ox, spacing) - spacing / 2
        dy = np.mod(yy + oy, spacing) - spacing / 2
        mask = np.clip(radius + 0.5 - np.hypot(dx, dy), 0.0, 1.0)
        tags = [family, _scale_tag(spacing, 9), c0, c1]
    elif family == "gradient":
        orient = ["horizontal", "vertical", "diagonal", "radial"][rng.integers(4)]
        if orient == "radial":
            cy, cx = rng.uniform(0, size, size=2)
            mask = np.hypot(xx - cx, yy - cy)
        else:
            mask = {"horizontal": xx, "vertical": yy, "diagonal": xx + yy}[orient]
        mask = (mask - mask.min()) / max(mask.max() - mask.min(), 1e-9)
        tags = [family, orient, "smooth", c0, c1]
    elif family == "checker":
        cell = int(rng.integers(2, 9))
        ox, oy = rng.integers(0, cell, size=2)
        mask = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(float)
        tags = [family, _scale_tag(cell, 5), c0, c1, "sharp"]
    elif family == "noise-field":
        sigma = float(rng.uniform(1.0, 3.0))
        field_ = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
        mask = np.clip(0.5 + 0.25 * field_, 0.0, 1.0)
        tags = [family, _scale_tag(sigma, 2.0), c0, c1, "colorful"]
    else:
        raise ValueError(f"unknown family {family!r}")
    img = np.clip(np.round(_blend(mask, COLORS[c0], COLORS[c1])), 0, 255).astype(np.uint8)
    lum = float((img.astype(float) @ [0.299, 0.587, 0.114]).mean())
    if lum > 170:
        tags.append("bright")
    elif lum < 85:
        tags.append("dark")
    return img, tags


def generate(cfg: GeneratorConfig, seed: int) -> List[tuple]:
    """In-memory dataset: list of (image, tags, family)."""
    fams = list(cfg.proportions)
    p = np.asarray([cfg.proportions[f] for f in fams], dtype=np.float64)
    p = p / p.sum()
    choice_rng = numpy_rng(seed, "families")
    picks = choice_rng.choice(len(fams), size=cfg.n, p=p)
    out = []
    for i, k in enumerate(picks):
        img, tags = render(fams[k], cfg.size, numpy_rng(seed, "texture", i))
        out.append((img, tags, fams[k]))
    return out


def generate_dataset(cfg: GeneratorConfig, seed: int, out_dir) -> Path:
    out_dir = Path(out_dir)
    try:
        (out_dir / "hq").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc}") from exc
    rows = []
    for i, (img, tags, fam) in enumerate(generate(cfg, seed)):
        name = f"hq/{i:05d}.png"
        write_png(out_dir / name, img)
        rows.append((name, fam, " ".join(tags)))
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "family", "tags"])
        w.writerows(rows)
    return out_dir


def load_dataset(root) -> List[tuple]:
    root = Path(root)
    items = []
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            items.append((read_png(root / row["file"]), row["tags"].split(), row["family"]))
    return items


def make_pairs(items: Sequence[tuple], deg: DegradationConfig, seed: int, label: str = "degrade") -> List[ImagePair]:
    """Degrade every HQ image with its own seeded stream."""
    return [degrade(img, deg, numpy_rng(seed, label, i), tags=tags) for i, (img, tags, *_rest) in enumerate(items)]


def write_pairs(pairs: Sequence[ImagePair], families: Sequence[str], out_dir, seed: int, label: str = "degrade") -> Path:
    """Write HQ/LQ PNGs and ``pairs.csv`` (one line per pair with its seed and recipe)."""
    out_dir = Path(out_dir)
    rows = []
    for i, (p, fam) in enumerate(zip(pairs, families)):
        hq, lq = f"hq/{i:05d}.png", f"lq/{i:05d}.png"
        write_png(out_dir / hq, p.hq)
        write_png(out_dir / lq, p.lq)
        rows.append((hq, lq, fam, " ".join(p.tags), derive_seed(seed, label, i), recipe_to_kv(p.recipe)))
    with open(out_dir / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "lq_file", "family", "tags", "seed", "recipe"])
        w.writerows(rows)
    with open(out_dir / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "family", "tags"])
        w.writerows([(r[0], r[2], r[3]) for r in rows])
    return out_dir


def load_pairs(root, deg: DegradationConfig, seed: int, label: str = "degrade") -> List[ImagePair]:
    """Pairs from a directory: read ``pairs.csv`` if present, else degrade the HQ set."""
    root = Path(root)
    if (root / "pairs.csv").exists():
        with open(root / "pairs.csv", newline="") as fh:
            return [
                ImagePair(hq=read_png(root / r["file"]), lq=read_png(root / r["lq_file"]), recipe={"kv": r["recipe"]}, tags=r["tags"].split())
                for r in csv.DictReader(fh)
            ]
    return make_pairs(load_dataset(root), deg, seed, label)


def posterize(img: np.ndarray, levels: int = 2) -> np.ndarray:
    step = 255.0 / (levels - 1)
    return (np.round(img.astype(np.float64) / step) * step).astype(np.uint8)


def palette_histogram(img: np.ndarray, bins: int = 4) -> np.ndarray:
    q = np.minimum(img.astype(np.int64) * bins // 256, bins - 1).reshape(-1, 3)
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    h = np.bincount(idx, minlength=bins**3).astype(np.float64)
    return h / h.sum()


def palette_distance(a, b, bins: int = 4) -> float:
    """L1 distance between palette histograms of two images (or image sets)."""

    def hist(x):
        if isinstance(x, np.ndarray) and x.ndim == 3:
            return palette_histogram(x, bins)
        return np.mean([palette_histogram(im, bins) for im in x], axis=0)

    return float(np.abs(hist(a) - hist(b)).sum())
