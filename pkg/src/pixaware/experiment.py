"""End-to-end pipelines shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import config as C
from .backbone import Denoiser, RestorationModel, TensorMap, build_model
from .codec import Codec
from .data import GeneratorConfig, generate, make_pairs, posterize
from .evaluation import evaluate, summarize
from .images import to_tensor, to_uint8
from .sampling import SamplerConfig, sample
from .seeding import derive_seed, torch_rng
from .training import TrainState, make_state, pretrain_base, train

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_paca", "no_dr", "no_highlevel", "no_negative")
ABLATION_FIELDS = ("variant", "paca", "degradation_removal", "high_level", "negative_prompt", "psnr_y", "ssim", "sharpness", "runtime_s")


def codec_from(cfg: dict) -> Codec:
    c = cfg["codec"]
    return Codec(c["factor"], c["latent_channels"], seed=c["seed"])


@dataclass
class World:
    cfg: dict
    codec: Codec
    sched: object
    train_items: list
    test_items: list
    train_pairs: list
    test_pairs: list


def build_world(cfg: dict) -> World:
    seed = cfg["seed"]
    d = cfg["data"]
    gen = GeneratorConfig(n=d["n"], size=d["size"])
    train_items = generate(gen, derive_seed(seed, "data", "train"))
    test_items = generate(replace(gen, n=d["test_n"]), derive_seed(seed, "data", "test"))
    deg = C.degradation_from(cfg)
    return World(
        cfg=cfg,
        codec=codec_from(cfg),
        sched=C.schedule_from(cfg),
        train_items=train_items,
        test_items=test_items,
        train_pairs=make_pairs(train_items, deg, seed, "degrade-train"),
        test_pairs=make_pairs(test_items, deg, seed, "degrade-test"),
    )


def styled_pairs(pairs, levels: int = 2):
    from .degradation import ImagePair

    return [ImagePair(hq=posterize(p.hq, levels), lq=p.lq, recipe=p.recipe, tags=list(p.tags) + ["posterized"]) for p in pairs]


def run_pretrain(world: World, style: Optional[str] = None, run_dir=None, callback=None) -> TrainState:
    cfg = world.cfg
    tcfg = C.train_config_from(cfg, "pretrain")
    mcfg = C.model_config_from(cfg)
    # every base shares the same initialisation and text table
    model = build_model(mcfg, seed=derive_seed(cfg["seed"], "base-init"), restoration=False)
    pairs = world.train_pairs if style is None else styled_pairs(world.train_pairs)
    rng = torch_rng(cfg["seed"], "pretrain", style or "photo")
    return pretrain_base(pairs, model, world.codec, world.sched, tcfg, rng=rng, run_dir=run_dir, callback=callback)


def variant_config(cfg: dict, variant: str) -> dict:
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")
    over = {}
    if variant == "no_paca":
        over = {"model": {"unet": {"fusion_mode": "zero_conv"}}}
    elif variant == "no_dr":
        over = {"model": {"use_dr": False}, "train": {"gamma": 0.0}}
    return C.merge(cfg, over)


def run_train(world: World, base: Denoiser, variant: str = "full", run_dir=None, steps=None, callback=None) -> TrainState:
    cfg = variant_config(world.cfg, variant)
    mcfg = C.model_config_from(cfg)
    model = build_model(mcfg, seed=derive_seed(cfg["seed"], "model-init", variant))
    model.load_base(base.state_dict())
    tcfg = C.train_config_from(cfg)
    state = make_state(model, world.codec, world.sched, tcfg)
    pairs = world.train_pairs
    if variant == "no_highlevel":
        pairs = [replace(p, tags=[]) for p in pairs]
    train(state, pairs, tcfg, rng=torch_rng(cfg["seed"], "train", variant), run_dir=run_dir, steps=steps, callback=callback)
    return state


def restorer(model: Denoiser, codec: Codec, sched, tagger_null: bool = False):
    def restore(lq, tags, sc: SamplerConfig, rng):
        tags = [[] for _ in tags] if tagger_null else tags
        return sample(model, codec, sched, lq, tags, sc, rng)

    return restore


def restore_pairs(model, codec, sched, pairs, sc: SamplerConfig, seed: int, null_tags=False, batch_size=16):
    out = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        tags = [[] if null_tags else p.tags for p in chunk]
        rng = torch.Generator().manual_seed(seed + start)
        out.extend(to_uint8(sample(model, codec, sched, to_tensor([p.lq for p in chunk]), tags, sc, rng)))
    return out


def time_per_image(model, codec, sched, pairs, sc: SamplerConfig, seed: int, repeats: int = 3) -> float:
    """Median wall-clock seconds to restore one image (batch of one)."""
    times = []
    lq = to_tensor([pairs[0].lq])
    for r in range(repeats):
        rng = torch.Generator().manual_seed(seed + r)
        t0 = time.perf_counter()
        sample(model, codec, sched, lq, [pairs[0].tags], sc, rng)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def evaluate_variant(world: World, model: Denoiser, variant: str) -> dict:
    cfg = world.cfg
    sc = C.sampler_from(cfg, negative=variant != "no_negative")
    null_tags = variant == "no_highlevel"
    restored = restore_pairs(model, world.codec, world.sched, world.test_pairs, sc, cfg["seed"], null_tags=null_tags)
    recs = [evaluate(f"{i:05d}", img, p.hq, sc.ans.alpha_bar_a if sc.ans else float("nan")) for i, (img, p) in enumerate(zip(restored, world.test_pairs))]
    s = next(iter(summarize(recs).values()))
    return {
        "variant": variant,
        "paca": variant != "no_paca",
        "degradation_removal": variant != "no_dr",
        "high_level": variant != "no_highlevel",
        "negative_prompt": variant != "no_negative",
        "psnr_y": s["psnr_y"],
        "ssim": s["ssim"],
        "sharpness": s["sharpness"],
        "runtime_s": time_per_image(model, world.codec, world.sched, world.test_pairs, sc, cfg["seed"]),
    }


def run_ablation(world: World, base: Denoiser, variants=VARIANTS, trained=None, csv_path=None) -> List[dict]:
    """Train (where needed) and evaluate each variant.

    ``full``, ``no_highlevel`` and ``no_negative`` share one trained model:
    they differ only in the prompts used at sampling time.
    """
    trained = dict(trained or {})
    rows = []
    for v in variants:
        key = v if v in ("no_paca", "no_dr") else "full"
        if key not in trained:
            trained[key] = run_train(world, base, key).model
        rows.append(evaluate_variant(world, trained[key], v))
    if csv_path is not None:
        write_ablation_csv(rows, csv_path)
    return rows


def write_ablation_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in ABLATION_FIELDS})
