"""Latent UNet, control branch, degradation-removal pyramid and fusion blocks.

Feature maps are channels-first ``(B, C, H, W)`` tensors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import TextEmbedder

FUSION_MODES = ("paca", "zero_conv", "none")
FROZEN_BASE = "frozen_base"
TRAINABLE_ADDED = "trainable_added"


@dataclass
class UNetConfig:
    latent_channels: int = 48
    base_width: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    head_dim: int = 16
    context_dim: int = 32
    fusion_mode: str = "paca"

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        for w in self.widths:
            if w % self.head_dim:
                raise ValueError(f"head_dim {self.head_dim} does not divide width {w}")

    @property
    def widths(self) -> List[int]:
        return [self.base_width * m for m in self.channel_multipliers]

    @property
    def n_levels(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


@dataclass
class ControlFeatures:
    features: List[torch.Tensor]
    rgb_previews: List[torch.Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# building blocks


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over (B, heads, N, d) tensors; ``mask`` is (B, M) keep-flags."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
    return scores.softmax(dim=-1) @ v


class Attention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int, head_dim: int):
        super().__init__()
        self.heads = query_dim // head_dim
        self.head_dim = head_dim
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v = nn.Linear(context_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attend(self, x, context, mask=None):
        """Multi-head attention output before the output projection."""
        q, k, v = self._split(self.to_q(x)), self._split(self.to_k(context)), self._split(self.to_v(context))
        a = attention(q, k, v, mask)
        b, h, n, d = a.shape
        return a.transpose(1, 2).reshape(b, n, h * d)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        return self.to_out(self.attend(x, context, mask))


class PixelAwareCrossAttention(nn.Module):
    """UNet features attend, pixel by pixel, to congruent control features.

    Both maps are flattened to ``h*w`` tokens; queries come from ``x`` and
    keys/values from ``y``. The output projection starts at zero so the block
    is an exact identity until trained.
    """

    def __init__(self, channels: int, head_dim: int, prenorm: bool = True):
        super().__init__()
        self.norm_x = nn.LayerNorm(channels) if prenorm else nn.Identity()
        self.norm_y = nn.LayerNorm(channels) if prenorm else nn.Identity()
        self.attn = Attention(channels, channels, head_dim)
        nn.init.zeros_(self.attn.to_out.weight)
        nn.init.zeros_(self.attn.to_out.bias)

    @staticmethod
    def _tokens(x):
        return x.flatten(2).transpose(1, 2)

    def attend(self, x, y):
        return self.attn.attend(self.norm_x(self._tokens(x)), self.norm_y(self._tokens(y)))

    def forward(self, x, y):
        if x.shape != y.shape:
            raise ValueError(f"paca expects congruent maps, got {tuple(x.shape)} and {tuple(y.shape)}")
        b, c, h, w = x.shape
        out = self.attn.to_out(self.attend(x, y))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class ZeroConv(nn.Module):
    """1x1 convolution initialised to zero; ``x + Z(y)`` fusion."""

    def __init__(self, c_in: int, c_out: Optional[int] = None):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out or c_in, 1)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x, y):
        if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
            raise ValueError(f"zero-conv fusion expects congruent maps, got {tuple(x.shape)} and {tuple(y.shape)}")
        return x + self.conv(y)


def paca(x: torch.Tensor, y: torch.Tensor, block: PixelAwareCrossAttention) -> torch.Tensor:
    return block(x, y)


def zero_conv_add(x: torch.Tensor, y: torch.Tensor, z: ZeroConv) -> torch.Tensor:
    return z(x, y)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeEmbed(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.SiLU(), nn.Linear(4 * width, 4 * width))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_embedding(t, self.width).to(dtype))


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    """Self-attention then text cross-attention over spatial tokens."""

    def __init__(self, channels: int, context_dim: int, head_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.ln1 = nn.LayerNorm(channels)
        self.self_attn = Attention(channels, channels, head_dim)
        self.ln2 = nn.LayerNorm(channels)
        self.cross_attn = Attention(channels, context_dim, head_dim)
        self.ln3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def forward(self, x, context, mask=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        tokens = tokens + self.self_attn(self.ln1(tokens))
        tokens = tokens + self.cross_attn(self.ln2(tokens), context, mask)
        tokens = tokens + self.ff(self.ln3(tokens))
        return x + tokens.transpose(1, 2).reshape(b, c, h, w)


class Downsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.conv = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class EncoderLevel(nn.Module):
    def __init__(self, c_in, c_out, temb_dim, context_dim, head_dim, downsample):
        super().__init__()
        self.res = ResBlock(c_in, c_out, temb_dim)
        self.attn = TransformerBlock(c_out, context_dim, head_dim)
        self.down = Downsample(c_out) if downsample else None


class DecoderLevel(nn.Module):
    def __init__(self, c_in, c_out, temb_dim, context_dim, head_dim, upsample):
        super().__init__()
        self.res = ResBlock(c_in, c_out, temb_dim)
        self.attn = TransformerBlock(c_out, context_dim, head_dim)
        self.up = Upsample(c_out) if upsample else None


def _build_encoder(cfg: UNetConfig) -> nn.ModuleList:
    widths = cfg.widths
    temb_dim = 4 * cfg.base_width
    levels, prev = [], widths[0]
    for i, w in enumerate(widths):
        levels.append(EncoderLevel(prev, w, temb_dim, cfg.context_dim, cfg.head_dim, i < len(widths) - 1))
        prev = w
    return nn.ModuleList(levels)


# ---------------------------------------------------------------------------
# UNet


class UNet(nn.Module):
    """Small latent UNet with one fusion site per encoder level."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths, temb_dim = cfg.widths, 4 * cfg.base_width
        self.time_embed = TimeEmbed(cfg.base_width)
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
        self.down = _build_encoder(cfg)
        self.mid_res1 = ResBlock(widths[-1], widths[-1], temb_dim)
        self.mid_attn = TransformerBlock(widths[-1], cfg.context_dim, cfg.head_dim)
        self.mid_res2 = ResBlock(widths[-1], widths[-1], temb_dim)
        up, prev = [], widths[-1]
        for i in reversed(range(cfg.n_levels)):
            up.append(DecoderLevel(prev + widths[i], widths[i], temb_dim, cfg.context_dim, cfg.head_dim, i > 0))
            prev = widths[i]
        self.up = nn.ModuleList(up)
        self.norm_out = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)

    @property
    def n_fusion_sites(self) -> int:
        return self.cfg.n_levels

    def forward(self, z, t, context, context_mask=None, control=None, fusers=None):
        temb = self.time_embed(t)
        h = self.conv_in(z)
        skips = []
        for i, level in enumerate(self.down):
            h = level.res(h, temb)
            h = level.attn(h, context, context_mask)
            if control is not None:
                h = fusers[i](h, control[i])
            skips.append(h)
            if level.down is not None:
                h = level.down(h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h, context, context_mask)
        h = self.mid_res2(h, temb)
        for level in self.up:
            h = level.res(torch.cat([h, skips.pop()], dim=1), temb)
            h = level.attn(h, context, context_mask)
            if level.up is not None:
                h = level.up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# control path


class DegradationRemoval(nn.Module):
    """Strided pyramid producing features at 1/2, 1/4 and 1/8 plus toRGB previews."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.widths = tuple(widths)
        self.conv_in = nn.Conv2d(3, widths[0], 3, padding=1)
        stages, prev = [], widths[0]
        for w in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, 3, stride=2, padding=1),
                    nn.SiLU(),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.SiLU(),
                )
            )
            prev = w
        self.stages = nn.ModuleList(stages)
        self.to_rgb = nn.ModuleList([nn.Conv2d(w, 3, 1) for w in widths])

    def forward(self, lq: torch.Tensor) -> ControlFeatures:
        h, w = lq.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"LQ size {h}x{w} must be divisible by 8")
        x = F.silu(self.conv_in(lq))
        feats, previews = [], []
        for stage, head in zip(self.stages, self.to_rgb):
            x = stage(x)
            feats.append(x)
            previews.append(head(x))
        return ControlFeatures(features=feats, rgb_previews=previews)


def degradation_removal_forward(lq: torch.Tensor, module: DegradationRemoval) -> ControlFeatures:
    return module(lq)


class ControlBranch(nn.Module):
    """Trainable copy of the UNet encoder driven by the LQ hint.

    The hint enters through a zero-initialised projection added after
    ``conv_in``; each encoder level emits one map ``y`` through a 1x1 head.
    """

    def __init__(self, cfg: UNetConfig, hint_channels: int):
        super().__init__()
        widths = cfg.widths
        self.time_embed = TimeEmbed(cfg.base_width)
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)
        self.hint_proj = nn.Conv2d(hint_channels, widths[0], 3, padding=1)
        nn.init.zeros_(self.hint_proj.weight)
        nn.init.zeros_(self.hint_proj.bias)
        self.down = _build_encoder(cfg)
        self.heads = nn.ModuleList([nn.Conv2d(w, w, 1) for w in widths])

    def copy_from_unet(self, unet: UNet) -> None:
        self.time_embed.load_state_dict(unet.time_embed.state_dict())
        self.conv_in.load_state_dict(unet.conv_in.state_dict())
        self.down.load_state_dict(unet.down.state_dict())

    def forward(self, hint, z_t, t, context, context_mask=None):
        if hint.shape[-2:] != z_t.shape[-2:]:
            raise ValueError(f"hint {tuple(hint.shape)} not congruent with latent {tuple(z_t.shape)}")
        temb = self.time_embed(t)
        h = self.conv_in(z_t) + self.hint_proj(hint)
        out = []
        for level, head in zip(self.down, self.heads):
            h = level.res(h, temb)
            h = level.attn(h, context, context_mask)
            out.append(head(h))
            if level.down is not None:
                h = level.down(h)
        return out


def control_forward(control_in, z_t, t, context, branch: ControlBranch, context_mask=None):
    hint = control_in.features[0] if isinstance(control_in, ControlFeatures) else control_in
    return branch(hint, z_t, t, context, context_mask)


# ---------------------------------------------------------------------------
# assembled models


@dataclass
class ModelConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    codec_factor: int = 4
    dr_widths: tuple = (16, 32, 64)
    use_dr: bool = True

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        self.dr_widths = tuple(self.dr_widths)
        if self.use_dr and self.codec_factor not in (2, 4, 8):
            raise ValueError("codec_factor must be 2, 4 or 8")

    @property
    def hint_level(self) -> int:
        """Index of the pyramid level whose resolution matches the latent."""
        return int(math.log2(self.codec_factor)) - 1

    def to_dict(self) -> dict:
        return {
            "unet": self.unet.to_dict(),
            "codec_factor": self.codec_factor,
            "dr_widths": list(self.dr_widths),
            "use_dr": self.use_dr,
        }


class Denoiser(nn.Module):
    """Text-conditioned latent UNet: the stand-in for a pretrained base model."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg.unet)
        self.text = TextEmbedder(cfg.unet.context_dim)

    def partition(self) -> dict:
        return {
            name: FROZEN_BASE if name.startswith("unet.") else TRAINABLE_ADDED
            for name in self.state_dict()
        }

    def freeze_base(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(not name.startswith("unet."))

    def embed(self, prompts):
        return self.text.batch(prompts)

    def forward(self, z_t, t, prompts, lq=None):
        context, mask = self.embed(prompts)
        return self.unet(z_t, t, context, mask), None


class RestorationModel(Denoiser):
    """Frozen base UNet plus degradation removal, control branch and fusion blocks."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        widths = cfg.unet.widths
        f = cfg.codec_factor
        if cfg.use_dr:
            self.dr = DegradationRemoval(cfg.dr_widths)
            hint_channels = cfg.dr_widths[cfg.hint_level]
        else:
            self.dr = None
            hint_channels = 3 * f * f
        self.control = ControlBranch(cfg.unet, hint_channels)
        self.control.copy_from_unet(self.unet)
        mode = cfg.unet.fusion_mode
        if mode == "paca":
            self.fusion = nn.ModuleList([PixelAwareCrossAttention(w, cfg.unet.head_dim) for w in widths])
        elif mode == "zero_conv":
            self.fusion = nn.ModuleList([ZeroConv(w) for w in widths])
        else:
            self.fusion = None

    def load_base(self, base_state: dict) -> None:
        """Load a base denoiser's UNet (and text table) and re-seed the control copy."""
        self.unet.load_state_dict({k[5:]: v for k, v in base_state.items() if k.startswith("unet.")})
        text = {k[5:]: v for k, v in base_state.items() if k.startswith("text.")}
        if text:
            self.text.load_state_dict(text)
        self.control.copy_from_unet(self.unet)

    def control_features(self, lq: torch.Tensor) -> ControlFeatures:
        if self.dr is not None:
            cf = self.dr(lq)
            return ControlFeatures(features=[cf.features[self.cfg.hint_level]], rgb_previews=cf.rgb_previews)
        return ControlFeatures(features=[F.pixel_unshuffle(lq, self.cfg.codec_factor)], rgb_previews=[])

    def forward(self, z_t, t, prompts, lq=None, control_in: Optional[ControlFeatures] = None):
        """Returns (prediction, ControlFeatures or None)."""
        context, mask = self.embed(prompts)
        if self.fusion is None:
            return self.unet(z_t, t, context, mask), None
        if control_in is None:
            if lq is None:
                raise ValueError("fusion requires LQ input or precomputed control features")
            control_in = self.control_features(lq)
        ys = self.control(control_in.features[0], z_t, t, context, mask)
        return self.unet(z_t, t, context, mask, control=ys, fusers=self.fusion), control_in


def unet_forward(model: Denoiser, z_t, t, prompts, control=None, mode: str = "eps"):
    """Network prediction; ``mode`` names the parameterisation the weights were trained for."""
    if mode not in ("eps", "v"):
        raise ValueError(f"unknown prediction mode {mode!r}")
    context, mask = model.embed(prompts)
    fusers = getattr(model, "fusion", None)
    if fusers is not None and control is None:
        raise ValueError(f"fusion_mode={model.cfg.unet.fusion_mode} requires control features")
    return model.unet(z_t, t, context, mask, control=control, fusers=fusers)


def build_model(cfg: ModelConfig, seed: int = 0, restoration: bool = True) -> Denoiser:
    """Seeded construction; the global torch RNG state is restored afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RestorationModel(cfg) if restoration else Denoiser(cfg)


# ---------------------------------------------------------------------------
# named parameter store


class TensorMap:
    """Named tensors, each labelled ``frozen_base`` or ``trainable_added``."""

    def __init__(self, entries: dict, partition: dict):
        if set(entries) != set(partition):
            raise ValueError("partition must label every entry exactly once")
        bad = {v for v in partition.values()} - {FROZEN_BASE, TRAINABLE_ADDED}
        if bad:
            raise ValueError(f"unknown partition labels {bad}")
        self.entries = dict(entries)
        self.partition = dict(partition)

    @classmethod
    def from_module(cls, model: Denoiser) -> "TensorMap":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(state, model.partition())

    def load_into(self, model: nn.Module) -> None:
        model.load_state_dict(self.entries)

    def names(self, label: Optional[str] = None) -> List[str]:
        return sorted(k for k, v in self.partition.items() if label is None or v == label)

    def subset(self, label: str) -> dict:
        return {k: self.entries[k] for k in self.names(label)}

    def __getitem__(self, name):
        return self.entries[name]

    def __len__(self):
        return len(self.entries)

    def equal(self, other: "TensorMap", label: Optional[str] = None) -> bool:
        """Bitwise equality of names, labels and values (optionally within one partition)."""
        mine, theirs = self.names(label), other.names(label)
        if mine != theirs:
            return False
        return all(
            self.partition[k] == other.partition[k]
            and self.entries[k].dtype == other.entries[k].dtype
            and torch.equal(self.entries[k], other.entries[k])
            for k in mine
        )
