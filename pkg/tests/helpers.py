"""Shared fixtures and independent oracles for the test suite."""

import math

import numpy as np
import torch

from pixaware.backbone import ModelConfig, PixelAwareCrossAttention, UNetConfig, build_model
from pixaware.codec import Codec
from pixaware.data import GeneratorConfig, generate, make_pairs
from pixaware.degradation import DegradationConfig
from pixaware.schedules import build_schedule
from pixaware.training import TrainConfig, compute_loss, make_state


def tiny_cfg(fusion="paca", use_dr=True):
    """Width-8, two-level model on 16x16 images (4x4 latents)."""
    return ModelConfig(
        unet=UNetConfig(latent_channels=48, base_width=8, channel_multipliers=(1, 2), head_dim=8, context_dim=8, fusion_mode=fusion),
        codec_factor=4,
        dr_widths=(4, 4, 4),
        use_dr=use_dr,
    )


def tiny_pairs(n=4, size=16, seed=0):
    items = generate(GeneratorConfig(n=n, size=size), seed)
    return make_pairs(items, DegradationConfig(), seed)


def tiny_state(seed=0, dtype=torch.float64, fusion="paca", cfg=None, n_steps=100):
    model = build_model(tiny_cfg(fusion), seed=seed).to(dtype)
    sched = build_schedule(n_steps, 0.0085, 0.12)
    return make_state(model, Codec(4, 48, seed=0), sched, cfg or TrainConfig())


def gradient_check(seed=0, gamma=0.7, coords_per_tensor=2):
    """Compare autograd against central differences on every trainable tensor.

    Zero-initialised projections are first perturbed so that every path
    carries gradient. For each tensor, the directional derivative along a
    random direction is checked, plus the coordinates with the largest
    gradient (tiny coordinates are dominated by rounding in the difference).
    Returns the largest relative error and the number of tensors checked.
    """
    cfg = TrainConfig(gamma=gamma)
    state = tiny_state(seed, cfg=cfg)
    model = state.model
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.requires_grad:
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.1)
    batch = tiny_pairs(2, seed=seed)
    t = torch.tensor([7, 63])
    eps = torch.randn(2, 48, 4, 4, generator=g, dtype=torch.float64)
    prompts = [list(batch[0].tags), []]

    def loss():
        return compute_loss(state, batch, cfg, g, t=t, eps=eps, prompts=prompts)[0]

    model.zero_grad()
    loss().backward()
    h = 1e-5
    worst, checked = 0.0, 0
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        grad = p.grad.detach().clone()
        d = torch.randn(p.shape, generator=g, dtype=p.dtype)
        probes = [(d, float((grad * d).sum()))]
        flat = grad.abs().view(-1).argsort(descending=True)[:coords_per_tensor]
        for i in flat.tolist():
            e = torch.zeros(p.numel(), dtype=p.dtype)
            e[i] = 1.0
            probes.append((e.view(p.shape), float(grad.view(-1)[i])))
        for direction, analytic in probes:
            with torch.no_grad():
                p.add_(h * direction)
                up = loss().item()
                p.sub_(2 * h * direction)
                down = loss().item()
                p.add_(h * direction)
            fd = (up - down) / (2 * h)
            scale = max(abs(fd), abs(analytic))
            if scale > 1e-7:
                worst = max(worst, abs(fd - analytic) / scale)
        checked += 1
    return worst, checked


def gaussian_eps_star(sched, mu, s):
    """Closed-form MMSE noise predictor for data z0 ~ N(mu, s^2 I)."""

    def predict(z, t_vec, prompts):
        a = sched.alpha_bar(int(t_vec[0]))
        return math.sqrt(1 - a) * (z - math.sqrt(a) * mu) / (a * s * s + 1 - a)

    return predict


def ddim_gaussian_moments(alpha_bars, ts, mu, s, eta):
    """Exact output mean and variance of the DDIM chain under the closed-form predictor.

    Every step is affine in z plus independent noise, so the first two
    moments propagate in closed form. ``alpha_bars[t-1]`` is the cumulative
    product at step t; step 0 has alpha_bar 1.
    """

    def ab(t):
        return 1.0 if t == 0 else float(alpha_bars[t - 1])

    a_n = ab(ts[0])
    m, v = math.sqrt(a_n) * mu, a_n * s * s + 1 - a_n
    for t, tp in zip(ts, list(ts[1:]) + [0]):
        a, ap = ab(t), ab(tp)
        k = math.sqrt(1 - a) / (a * s * s + 1 - a)
        sig = eta * math.sqrt((1 - ap) / (1 - a)) * math.sqrt(1 - a / ap)
        c = math.sqrt(max(1 - ap - sig * sig, 0.0))
        # z' = sqrt(ap) * (z - sqrt(1-a) eps) / sqrt(a) + c * eps + sig * xi,  eps = k (z - sqrt(a) mu)
        gain = math.sqrt(ap) * (1 - math.sqrt(1 - a) * k) / math.sqrt(a) + c * k
        offset = math.sqrt(ap) * math.sqrt(1 - a) * k * mu - c * k * math.sqrt(a) * mu
        m, v = gain * m + offset, gain * gain * v + sig * sig
    return m, v


def marginal_start(sched, mu, s, n, dim, seed):
    """Samples from the exact forward marginal at t = N."""
    a = sched.terminal_alpha_bar
    g = torch.Generator().manual_seed(seed)
    return math.sqrt(a) * mu + math.sqrt(a * s * s + 1 - a) * torch.randn(n, dim, generator=g, dtype=torch.float64), g


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


def np_rng(seed):
    return np.random.default_rng(seed)


def randomize_(module, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)


def brute_force_paca(block: PixelAwareCrossAttention, x, y):
    """Entry-by-entry attention over flattened pixels, including the pre-norms."""
    b, c, h, w = x.shape
    attn = block.attn
    heads, d = attn.heads, attn.head_dim
    n = h * w

    def tokens(t):
        return [[t[bi, :, i // w, i % w] for i in range(n)] for bi in range(b)]

    def layer_norm(v, ln):
        mu = sum(v.tolist()) / c
        var = sum((e - mu) ** 2 for e in v.tolist()) / c
        return torch.tensor([(v[k].item() - mu) / math.sqrt(var + ln.eps) * ln.weight[k].item() + ln.bias[k].item() for k in range(c)], dtype=torch.float64)

    out = torch.zeros_like(x)
    Wq, Wk, Wv = attn.to_q.weight, attn.to_k.weight, attn.to_v.weight
    Wo, bo = attn.to_out.weight, attn.to_out.bias
    for bi, (xs, ys) in enumerate(zip(tokens(x), tokens(y))):
        xs = [layer_norm(v, block.norm_x) for v in xs]
        ys = [layer_norm(v, block.norm_y) for v in ys]
        for i in range(n):
            a_full = torch.zeros(c, dtype=torch.float64)
            q = Wq @ xs[i]
            for hd in range(heads):
                sl = slice(hd * d, (hd + 1) * d)
                scores = []
                for j in range(n):
                    k = Wk @ ys[j]
                    scores.append(sum(q[sl][m].item() * k[sl][m].item() for m in range(d)) / math.sqrt(d))
                mx = max(scores)
                weights = [math.exp(s - mx) for s in scores]
                z = sum(weights)
                for j in range(n):
                    a_full[sl] += weights[j] / z * (Wv @ ys[j])[sl]
            res = Wo @ a_full + bo
            out[bi, :, i // w, i % w] = x[bi, :, i // w, i % w] + res
    return out
