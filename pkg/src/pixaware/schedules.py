"""Discrete noise schedules, forward diffusion and adjustable initial latents.

Timesteps are 1-based throughout: ``t`` ranges over ``1..N`` and ``t = 0``
denotes the clean signal (``alpha_bar_0 = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

# alpha_bar_a used as the default fidelity/perception operating point.
OPERATING_ALPHA_BAR_A = 0.1189


@dataclass(frozen=True)
class NoiseSchedule:
    n_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    rescaled: bool = False

    def _index(self, t: int) -> int:
        if not 1 <= int(t) <= self.n_steps:
            raise ValueError(f"timestep {t} outside [1, {self.n_steps}]")
        return int(t) - 1

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` with the convention ``alpha_bar_0 = 1``."""
        if int(t) == 0:
            return 1.0
        return float(self.alpha_bars[self._index(t)])

    @property
    def terminal_alpha_bar(self) -> float:
        return float(self.alpha_bars[-1])

    def to_dict(self) -> dict:
        return {
            "n_steps": self.n_steps,
            "alpha_bars": [float(a) for a in self.alpha_bars],
            "rescaled": self.rescaled,
        }

    @classmethod
    def from_alpha_bars(cls, alpha_bars, rescaled: bool = False) -> "NoiseSchedule":
        alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        alphas = alpha_bars / prev
        return cls(
            n_steps=len(alpha_bars),
            betas=1.0 - alphas,
            alphas=alphas,
            alpha_bars=alpha_bars,
            rescaled=rescaled,
        )


@dataclass(frozen=True)
class AnsConfig:
    """Strength of the LQ residual kept in the initial latent."""

    alpha_bar_a: float = OPERATING_ALPHA_BAR_A
    source_step: Optional[int] = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.alpha_bar_a <= 1.0:
            raise ValueError(f"alpha_bar_a={self.alpha_bar_a} outside [0, 1]")

    @classmethod
    def from_step(cls, sched: NoiseSchedule, n: int) -> "AnsConfig":
        return cls(alpha_bar_a=sched.alpha_bar(n), source_step=int(n))


def build_schedule(
    n_steps: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    spacing: str = "scaled_linear",
) -> NoiseSchedule:
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not 0.0 < beta_start < 1.0 or not 0.0 < beta_end < 1.0:
        raise ValueError("betas must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start > beta_end: schedule would be non-monotone")

    if spacing == "linear":
        betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    elif spacing == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, n_steps, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown spacing {spacing!r}")

    alphas = 1.0 - betas
    return NoiseSchedule(
        n_steps=n_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
    )


def q_sample(sched: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Forward-diffuse ``z0`` to step ``t``.

    ``t`` is either an int or a 1-D integer tensor with one entry per batch item.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    a = _alpha_bar_like(sched, t, z0)
    return a.sqrt() * z0 + (1.0 - a).sqrt() * eps


def _alpha_bar_like(sched: NoiseSchedule, t, ref: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().long()
        if idx.min() < 1 or idx.max() > sched.n_steps:
            raise ValueError(f"timesteps outside [1, {sched.n_steps}]")
        a = torch.as_tensor(sched.alpha_bars[idx.numpy() - 1], dtype=ref.dtype, device=ref.device)
        return a.reshape(-1, *([1] * (ref.ndim - 1)))
    return torch.tensor(float(sched.alpha_bars[sched._index(t)]), dtype=ref.dtype, device=ref.device)


def ans_init(
    sched: NoiseSchedule,
    z_lr: torch.Tensor,
    ans: AnsConfig,
    rng: torch.Generator,
) -> torch.Tensor:
    """Initial latent carrying an ``alpha_bar_a``-weighted LQ residual."""
    if sched.rescaled:
        raise ValueError("adjustable initialisation is undefined for a zero-terminal-SNR schedule")
    if not 0.0 <= ans.alpha_bar_a <= 1.0:
        raise ValueError(f"alpha_bar_a={ans.alpha_bar_a} outside [0, 1]")
    # drawn in float64 so the stream matches pure-noise initialisation
    noise = torch.randn(z_lr.shape, generator=rng, dtype=torch.float64).to(z_lr.dtype)
    return ans_combine(sched, z_lr, ans.alpha_bar_a, noise)


def ans_combine(sched: NoiseSchedule, z_lr: torch.Tensor, alpha_bar_a: float, noise: torch.Tensor) -> torch.Tensor:
    k = alpha_bar_a * sched.terminal_alpha_bar
    return (k**0.5) * z_lr + ((1.0 - k) ** 0.5) * noise


def rescale_zero_terminal_snr(sched: NoiseSchedule) -> NoiseSchedule:
    if sched.rescaled:
        raise ValueError("schedule already rescaled")
    root = np.sqrt(sched.alpha_bars)
    first, last = root[0], root[-1]
    if first == last:
        raise ValueError("degenerate schedule: alpha_bar_1 == alpha_bar_N")
    root = (root - last) / (first - last)
    root[0] = 1.0
    root[-1] = 0.0
    alpha_bars = root**2

    alphas = np.empty_like(alpha_bars)
    alphas[0] = alpha_bars[0]
    alphas[1:-1] = alpha_bars[1:-1] / alpha_bars[:-2]
    # alpha_bar'_N = 0 makes the ratio 0/x; store it explicitly.
    alphas[-1] = 0.0
    return NoiseSchedule(
        n_steps=sched.n_steps,
        betas=1.0 - alphas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        rescaled=True,
    )


def snr(sched: NoiseSchedule, t: int) -> float:
    a = float(sched.alpha_bars[sched._index(t)])
    if a == 1.0:
        return float("inf")
    return a / (1.0 - a)
