"""DDIM sampling with adjustable initialisation, guidance and base swapping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbone import FROZEN_BASE, Denoiser, TensorMap
from .codec import Codec
from .conditioning import GuidanceConfig, cfg_combine
from .schedules import AnsConfig, NoiseSchedule, ans_init

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    num_steps: int = 20
    eta: float = 0.0
    guidance: Optional[GuidanceConfig] = field(default_factory=GuidanceConfig)
    ans: Optional[AnsConfig] = field(default_factory=AnsConfig)
    prediction_mode: str = "eps"
    seed: int = 0
    # clamp every x0 estimate to the decodable image range before stepping
    clip_x0: bool = False

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.prediction_mode not in ("eps", "v"):
            raise ValueError(f"unknown prediction_mode {self.prediction_mode!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def timesteps(n_train: int, num_steps: int) -> list:
    """Uniformly strided, strictly decreasing subsequence from ``N`` down to 1."""
    if num_steps > n_train:
        raise ValueError(f"num_steps={num_steps} exceeds schedule length {n_train}")
    if num_steps == 1:
        return [n_train]
    ts = np.round(np.linspace(n_train, 1, num_steps)).astype(int).tolist()
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise ValueError("timestep subsequence is not strictly decreasing")
    return ts


def ddim_step(
    sched: NoiseSchedule,
    z_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
    eta: float = 0.0,
    rng: Optional[torch.Generator] = None,
    x0: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One DDIM update from ``t`` to ``t_prev``.

    ``x0`` may be supplied directly (needed where ``alpha_bar_t = 0`` and the
    clean estimate cannot be recovered from ``eps``).
    """
    if t_prev > t or t_prev < 0:
        raise ValueError(f"invalid timestep order t={t}, t_prev={t_prev}")
    a_t, a_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
    if x0 is None:
        if a_t == 0.0:
            raise ValueError("alpha_bar_t = 0: pass x0 explicitly")
        x0 = (z_t - (1.0 - a_t) ** 0.5 * eps) / a_t**0.5
    sigma = 0.0
    if eta > 0 and a_t < 1.0:
        sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)) ** 0.5 * (1.0 - a_t / a_prev) ** 0.5
    out = a_prev**0.5 * x0 + max(1.0 - a_prev - sigma**2, 0.0) ** 0.5 * eps
    if sigma > 0:
        noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype, device=z_t.device)
        out = out + sigma * noise
    return out


def to_eps_x0(sched: NoiseSchedule, z_t: torch.Tensor, pred: torch.Tensor, t: int, mode: str):
    """Convert a network prediction into (eps, x0) estimates."""
    a = sched.alpha_bar(t)
    if mode == "eps":
        x0 = (z_t - (1.0 - a) ** 0.5 * pred) / a**0.5 if a > 0 else None
        return pred, x0
    eps = a**0.5 * pred + (1.0 - a) ** 0.5 * z_t
    x0 = a**0.5 * z_t - (1.0 - a) ** 0.5 * pred
    return eps, x0


class Predictor:
    """Wraps a model so the sampler only sees ``(z_t, t, prompts) -> prediction``.

    Control features are computed once from the LQ image and reused at every step.
    """

    def __init__(self, model: Denoiser, lq: Optional[torch.Tensor] = None):
        self.model = model
        self.lq = lq
        self.control_in = None
        if getattr(model, "fusion", None) is not None:
            if lq is None:
                raise ValueError("this model needs an LQ image for its control branch")
            self.control_in = model.control_features(lq)
        self.calls = 0

    def __call__(self, z_t, t_vec, prompts):
        self.calls += 1
        if self.control_in is None:
            return self.model(z_t, t_vec, prompts)[0]
        ci = self.control_in
        if z_t.shape[0] != ci.features[0].shape[0]:
            reps = z_t.shape[0] // ci.features[0].shape[0]
            ci = type(ci)(features=[f.repeat(reps, 1, 1, 1) for f in ci.features])
        return self.model(z_t, t_vec, prompts, control_in=ci)[0]


@torch.no_grad()
def sample_latent(
    predict,
    sched: NoiseSchedule,
    z_init: torch.Tensor,
    prompts: Sequence[Sequence[str]],
    sc: SamplerConfig,
    rng: torch.Generator,
    x0_clip: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
) -> torch.Tensor:
    """Run the DDIM chain from ``z_init`` at ``t = N``; ``predict(z, t_vec, prompts)``.

    ``x0_clip`` maps an x0 estimate into the valid latent set; eps is then
    re-derived from the clipped x0 so the step stays on the same trajectory family.
    """
    if sched.rescaled and sc.prediction_mode == "eps":
        raise ValueError("a zero-terminal-SNR schedule needs v-prediction")
    ts = timesteps(sched.n_steps, sc.num_steps)
    b = z_init.shape[0]
    g = sc.guidance
    negative = [list(g.negative_tokens)] * b if g is not None else None
    z = z_init
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        t_vec = torch.full((b,), t, dtype=torch.long)
        if g is None:
            eps, x0 = to_eps_x0(sched, z, predict(z, t_vec, prompts), t, sc.prediction_mode)
        else:
            both = predict(torch.cat([z, z]), torch.cat([t_vec, t_vec]), list(prompts) + negative)
            e_pos, x_pos = to_eps_x0(sched, z, both[:b], t, sc.prediction_mode)
            e_neg, x_neg = to_eps_x0(sched, z, both[b:], t, sc.prediction_mode)
            eps = cfg_combine(e_pos, e_neg, g)
            x0 = cfg_combine(x_pos, x_neg, g) if sc.prediction_mode == "v" else None
        if x0_clip is not None:
            a = sched.alpha_bar(t)
            if x0 is None:
                x0 = (z - (1.0 - a) ** 0.5 * eps) / a**0.5
            x0 = x0_clip(x0)
            eps = (z - a**0.5 * x0) / (1.0 - a) ** 0.5
            z = ddim_step(sched, z, eps, t, t_prev, sc.eta, rng, x0=x0)
            continue
        z = ddim_step(sched, z, eps, t, t_prev, sc.eta, rng, x0=x0 if sc.prediction_mode == "v" else None)
    return z


def initial_latent(sched: NoiseSchedule, shape, z_lr, sc: SamplerConfig, rng: torch.Generator, dtype):
    if sc.ans is not None and not sched.rescaled:
        if z_lr is None:
            raise ValueError("adjustable initialisation requested without an LQ image")
        return ans_init(sched, z_lr, sc.ans, rng)
    if sc.ans is not None:
        log.info("zero-terminal-SNR schedule: starting from pure noise")
    return torch.randn(shape, generator=rng, dtype=torch.float64).to(dtype)


@torch.no_grad()
def sample(
    model: Denoiser,
    codec: Codec,
    sched: NoiseSchedule,
    lq: Optional[torch.Tensor],
    tags: Sequence[Sequence[str]],
    sc: SamplerConfig,
    rng: Optional[torch.Generator] = None,
    latent_hw: Optional[tuple] = None,
) -> torch.Tensor:
    """Restore (or generate) a batch; returns decoded images in [-1, 1] (unclamped).

    ``lq`` is a (B, 3, H, W) tensor in [-1, 1]; without it ``latent_hw`` sets
    the latent size for unconditional generation.
    """
    if rng is None:
        rng = torch.Generator().manual_seed(sc.seed)
    model.eval()
    dtype = next(model.parameters()).dtype
    if lq is not None:
        lq = lq.to(dtype)
        z_lr = codec.encode(lq)
        shape = z_lr.shape
    else:
        if sc.ans is not None and not sched.rescaled:
            raise ValueError("adjustable initialisation requested without an LQ image")
        z_lr = None
        h, w = latent_hw
        shape = (len(tags), codec.latent_channels, h, w)
    z_init = initial_latent(sched, shape, z_lr, sc, rng, dtype)
    predictor = Predictor(model, lq)
    clip = None
    if sc.clip_x0:

        def clip(x0):
            return codec.encode(codec.decode(x0).clamp(-1.0, 1.0))

    z0 = sample_latent(predictor, sched, z_init, [list(t) for t in tags], sc, rng, x0_clip=clip)
    return codec.decode(z0)


def swap_base(model: TensorMap, base: TensorMap) -> TensorMap:
    """Replace the frozen base tensors of ``model`` with those of ``base``.

    The base must supply every frozen name with identical shape and dtype;
    otherwise nothing is changed and ``ValueError`` is raised.
    """
    wanted = model.names(FROZEN_BASE)
    problems = []
    for name in wanted:
        if name not in base.entries:
            problems.append(f"missing {name}")
            continue
        a, b = model[name], base[name]
        if a.shape != b.shape or a.dtype != b.dtype:
            problems.append(f"{name}: {tuple(b.shape)}/{b.dtype} != {tuple(a.shape)}/{a.dtype}")
    extra = set(base.names(FROZEN_BASE)) - set(wanted)
    problems += [f"unexpected {n}" for n in sorted(extra)]
    if problems:
        raise ValueError("base checkpoint incompatible: " + "; ".join(problems[:5]))
    entries = dict(model.entries)
    for name in wanted:
        entries[name] = base[name].clone()
    return TensorMap(entries, model.partition)
