"""Losses, the optimisation step and the toy base-model pretraining loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Denoiser, RestorationModel
from .codec import Codec
from .conditioning import drop_prompts
from .degradation import ImagePair, pyramid_decompose
from .images import to_tensor
from .schedules import NoiseSchedule, _alpha_bar_like, q_sample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lr: float = 1e-3
    batch_size: int = 4
    steps: int = 2000
    prompt_dropout: float = 0.5
    prediction_mode: str = "eps"
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_every: int = 100
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ValueError("prompt_dropout must lie in [0, 1]")
        if self.prediction_mode not in ("eps", "v"):
            raise ValueError(f"unknown prediction_mode {self.prediction_mode!r}")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class LossRecord:
    step: int
    l_df: float
    l_dr: float
    total: float


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: Optional[LossRecord] = None):
        super().__init__(message)
        self.record = record


# ---------------------------------------------------------------------------
# losses


def dr_loss(previews: Sequence[torch.Tensor], targets: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over scales of the per-scale mean absolute error."""
    if len(previews) != len(targets):
        raise ValueError(f"{len(previews)} previews vs {len(targets)} targets")
    total = None
    for p, t in zip(previews, targets):
        if p.shape != t.shape:
            raise ValueError(f"scale mismatch: {tuple(p.shape)} vs {tuple(t.shape)}")
        term = (p - t).abs().mean()
        total = term if total is None else total + term
    return total


def diffusion_loss(pred: torch.Tensor, target: torch.Tensor, mode: str = "eps") -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if mode not in ("eps", "v"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    return F.mse_loss(pred, target)


def v_target(sched: NoiseSchedule, z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    a = _alpha_bar_like(sched, t, z0)
    return a.sqrt() * eps - (1.0 - a).sqrt() * z0


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    model: Denoiser
    optimizer: torch.optim.Optimizer
    codec: Codec
    sched: NoiseSchedule
    step: int = 0
    history: List[LossRecord] = field(default_factory=list)


def make_state(model: Denoiser, codec: Codec, sched: NoiseSchedule, cfg: TrainConfig, train_base: bool = False) -> TrainState:
    """Optimiser over the trainable subset.

    Restoration training freezes the base UNet; base pretraining
    (``train_base=True``) trains only the UNet and keeps the text table fixed.
    """
    for name, p in model.named_parameters():
        is_base = name.startswith("unet.")
        p.requires_grad_(is_base if train_base else not is_base)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
    return TrainState(model=model, optimizer=opt, codec=codec, sched=sched)


def _batch_tensors(batch: Sequence[ImagePair], dtype):
    hq = to_tensor([p.hq for p in batch], dtype)
    lq = to_tensor([p.lq for p in batch], dtype)
    return hq, lq


def compute_loss(
    state: TrainState,
    batch: Sequence[ImagePair],
    cfg: TrainConfig,
    rng: torch.Generator,
    t: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
    prompts=None,
):
    """Total loss and its parts for one batch. ``t``, ``eps`` and ``prompts`` may be fixed by the caller."""
    if not batch:
        raise ValueError("empty batch")
    model, sched = state.model, state.sched
    dtype = next(model.parameters()).dtype
    hq, lq = _batch_tensors(batch, dtype)
    z0 = state.codec.encode(hq)
    n = len(batch)
    if t is None:
        t = torch.randint(1, sched.n_steps + 1, (n,), generator=rng)
    if eps is None:
        eps = torch.randn(z0.shape, generator=rng, dtype=torch.float64).to(dtype)
    if prompts is None:
        prompts = drop_prompts([p.tags for p in batch], cfg.prompt_dropout, rng)
    z_t = q_sample(sched, z0, t, eps)

    pred, control = model(z_t, t, prompts, lq=lq)
    target = eps if cfg.prediction_mode == "eps" else v_target(sched, z0, eps, t)
    l_df = diffusion_loss(pred, target, cfg.prediction_mode)

    l_dr = torch.zeros((), dtype=dtype)
    if control is not None and control.rgb_previews and cfg.gamma > 0:
        targets = pyramid_decompose(hq, _scales(hq, control.rgb_previews))
        l_dr = dr_loss(control.rgb_previews, targets)
    total = l_df + cfg.gamma * l_dr
    return total, l_df, l_dr


def _scales(hq, previews):
    return [Fraction(p.shape[-1], hq.shape[-1]) for p in previews]


def train_step(state: TrainState, batch: Sequence[ImagePair], cfg: TrainConfig, rng: torch.Generator) -> LossRecord:
    state.model.train()
    total, l_df, l_dr = compute_loss(state, batch, cfg, rng)
    record = LossRecord(state.step + 1, l_df.item(), l_dr.item(), total.item())
    if not math.isfinite(record.total):
        raise TrainingDiverged(f"non-finite loss at step {record.step}: {record}", record)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    state.history.append(record)
    return record


def train(
    state: TrainState,
    dataset: Sequence[ImagePair],
    cfg: TrainConfig,
    rng: Optional[torch.Generator] = None,
    run_dir=None,
    steps: Optional[int] = None,
    callback=None,
) -> List[LossRecord]:
    """Run ``steps`` optimisation steps with uniformly drawn minibatches.

    ``callback(state, record)`` runs after every step (used for periodic checkpoints).
    """
    if rng is None:
        rng = torch.Generator().manual_seed(cfg.seed)
    steps = cfg.steps if steps is None else steps
    writer = None
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        fh = open(Path(run_dir) / "loss.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "l_df", "l_dr", "total"])
    initial, over = None, 0
    try:
        for _ in range(steps):
            idx = torch.randint(len(dataset), (cfg.batch_size,), generator=rng).tolist()
            record = train_step(state, [dataset[i] for i in idx], cfg, rng)
            if writer:
                writer.writerow([record.step, f"{record.l_df:.8g}", f"{record.l_dr:.8g}", f"{record.total:.8g}"])
            if initial is None:
                initial = record.total
            over = over + 1 if record.total > cfg.divergence_factor * initial else 0
            if over >= cfg.divergence_patience:
                raise TrainingDiverged(
                    f"loss above {cfg.divergence_factor}x initial for {over} consecutive steps", record
                )
            if callback is not None:
                callback(state, record)
            if cfg.log_every and record.step % cfg.log_every == 0:
                log.info("step %d  l_df=%.4f  l_dr=%.4f", record.step, record.l_df, record.l_dr)
    finally:
        if writer:
            fh.close()
    return state.history


def moving_average(values: Sequence[float], window: int = 100) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        raise ValueError(f"need at least {window} values")
    c = np.cumsum(np.concatenate([[0.0], values]))
    return (c[window:] - c[:-window]) / window


def pretrain_base(
    dataset: Sequence[ImagePair],
    model: Denoiser,
    codec: Codec,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: Optional[torch.Generator] = None,
    run_dir=None,
    callback=None,
) -> TrainState:
    """Train the text-conditioned UNet alone with the diffusion loss.

    Only ``hq`` and ``tags`` of each pair are used. The result's ``unet.*``
    tensors serve as a frozen base for restoration training or base swaps.
    """
    if isinstance(model, RestorationModel):
        raise TypeError("pretrain_base expects a plain Denoiser")
    state = make_state(model, codec, sched, cfg, train_base=True)
    train(state, dataset, cfg, rng=rng, run_dir=run_dir, callback=callback)
    return state


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d
