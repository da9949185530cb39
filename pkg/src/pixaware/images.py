"""Conversions between uint8 (H, W, 3) images, [-1, 1] tensors and PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return torch.from_numpy(arr / 127.5 - 1.0).permute(0, 3, 1, 2).to(dtype).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(B, 3, H, W) in [-1, 1] -> (B, H, W, 3) uint8; clamping happens only here."""
    arr = x.detach().to(torch.float64).clamp(-1.0, 1.0).permute(0, 2, 3, 1).cpu().numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG", optimize=False)


def grid(images: Sequence[np.ndarray], cols: int = 8) -> np.ndarray:
    h, w, c = images[0].shape
    rows = -(-len(images) // cols)
    out = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i, im in enumerate(images):
        r, q = divmod(i, cols)
        out[r * h : (r + 1) * h, q * w : (q + 1) * w] = im
    return out
