"""Labelled seed splitting: every subsystem draws from its own stream."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *labels) -> int:
    key = ":".join([str(int(root))] + [str(x) for x in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def torch_rng(root: int, *labels) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, *labels))


def numpy_rng(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))
