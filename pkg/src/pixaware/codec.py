"""Fixed orthonormal latent codec used in place of a learned autoencoder."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


class Codec:
    """Space-to-depth by ``factor`` followed by a per-pixel orthonormal projection.

    With ``latent_channels == 3 * factor**2`` the map is a rotation of pixel
    space and therefore exactly invertible; fewer channels give an orthogonal
    projection onto the basis row space.
    """

    def __init__(self, factor: int = 4, latent_channels: int = 48, seed: int = 0, basis=None):
        if factor not in (2, 4, 8):
            raise ValueError(f"factor must be 2, 4 or 8, got {factor}")
        full = 3 * factor * factor
        if not 1 <= latent_channels <= full:
            raise ValueError(f"latent_channels must be in [1, {full}]")
        self.factor = factor
        self.latent_channels = latent_channels
        self.seed = seed
        if basis is None:
            basis = make_basis(latent_channels, full, seed)
        basis = np.asarray(basis, dtype=np.float64)
        if basis.shape != (latent_channels, full):
            raise ValueError(f"basis shape {basis.shape} != {(latent_channels, full)}")
        self.basis = basis

    def _basis(self, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.basis, dtype=like.dtype, device=like.device)

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) image in [-1, 1] -> (B, L, H/f, W/f) latent."""
        h, w = img.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"image size {h}x{w} not divisible by {self.factor}")
        packed = F.pixel_unshuffle(img, self.factor)
        return torch.einsum("lk,bkhw->blhw", self._basis(img), packed)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[1] != self.latent_channels:
            raise ValueError(f"latent has {z.shape[1]} channels, codec expects {self.latent_channels}")
        packed = torch.einsum("lk,blhw->bkhw", self._basis(z), z)
        return F.pixel_shuffle(packed, self.factor)

    def state(self) -> dict:
        return {"factor": self.factor, "latent_channels": self.latent_channels, "seed": self.seed}

    def __eq__(self, other):
        return (
            isinstance(other, Codec)
            and self.factor == other.factor
            and self.latent_channels == other.latent_channels
            and np.array_equal(self.basis, other.basis)
        )


def make_basis(rows: int, dim: int, seed: int) -> np.ndarray:
    """Seeded orthonormal rows via QR of a Gaussian matrix."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # fix the sign ambiguity so the basis is a deterministic function of the seed
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q.T[:rows])
