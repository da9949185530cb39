"""Command-line entry point: ``pixaware <subcommand> ...``.

Every invocation writes one run manifest (``<out>.manifest.json`` unless
``--manifest`` is given). Failures exit nonzero with a single line
``error: <category>: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import config as C
from .backbone import FROZEN_BASE, TRAINABLE_ADDED, TensorMap
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conditioning import GuidanceConfig
from .data import GeneratorConfig, generate_dataset, load_dataset, load_pairs, make_pairs, write_pairs
from .evaluation import evaluate, sweep_alpha_a, trend, write_csv
from .experiment import VARIANTS, World, codec_from, restorer, run_ablation, run_pretrain, run_train, styled_pairs
from .images import grid, read_png, to_tensor, to_uint8, write_png
from .manifest import RunManifest, hash_tree, write_manifest
from .sampling import sample, swap_base
from .schedules import AnsConfig
from .seeding import derive_seed
from .training import TrainingDiverged

log = logging.getLogger("pixaware")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _category(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, yaml.YAMLError):
        return "config"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (ValueError, KeyError, TypeError)):
        return "invalid-input"
    return "internal"


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> dict:
    overrides = {}
    if args.toy:
        overrides = C.merge(overrides, C.TOY)
    cfg = C.load_config(args.config, overrides)
    for item in args.set or []:
        if "=" not in item:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        C.set_dotted(cfg, key, value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _world(cfg: dict, train_dir=None, test_dir=None) -> World:
    deg = C.degradation_from(cfg)
    seed = cfg["seed"]
    train = load_pairs(train_dir, deg, seed, "degrade-train") if train_dir else []
    test = load_pairs(test_dir, deg, seed, "degrade-test") if test_dir else []
    return World(cfg, codec_from(cfg), C.schedule_from(cfg), [], [], train, test)


def _check_compatible(world: World, ck) -> None:
    if ck.codec != world.codec:
        raise CheckpointError("checkpoint codec differs from the configured codec")
    if ck.sched.n_steps != world.sched.n_steps or not np.array_equal(ck.sched.alpha_bars, world.sched.alpha_bars):
        raise CheckpointError("checkpoint noise schedule differs from the configured schedule")


def _save(path, model, world: World, cfg: dict, kind: str, **extra):
    meta = {"kind": kind, "model_config": model.cfg.to_dict(), "run_config": cfg, **extra}
    return save_checkpoint(path, TensorMap.from_module(model), world.codec, world.sched, meta)


def _periodic(run_dir: Path, every: int, world: World, cfg: dict, kind: str):
    if not every:
        return None

    def cb(state, record):
        if record.step % every == 0:
            _save(run_dir / f"ckpt-{record.step:06d}", state.model, world, cfg, kind)

    return cb


def _model_from(path, world: World):
    ck = load_checkpoint(path)
    _check_compatible(world, ck)
    return ck.build_model()


def _with_base(model, base_path):
    if base_path is None:
        return model
    base = load_checkpoint(base_path)
    swapped = swap_base(TensorMap.from_module(model), base.tensors)
    swapped.load_into(model)
    return model


def _split(s: str):
    return [t.strip() for t in s.split(",") if t.strip()] if s else []


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs) path lists for the manifest


def cmd_gen_data(args, cfg):
    n = args.n or cfg["data"]["n"]
    gen = GeneratorConfig(n=n, size=cfg["data"]["size"])
    generate_dataset(gen, derive_seed(cfg["seed"], "data", args.split), args.out)
    return [], [args.out]


def cmd_degrade(args, cfg):
    items = load_dataset(args.data)
    seed = cfg["seed"]
    label = f"degrade-{args.split}"
    pairs = make_pairs(items, C.degradation_from(cfg), seed, label)
    write_pairs(pairs, [fam for _, _, fam in items], args.out, seed, label)
    return [args.data], [args.out]


def cmd_pretrain_base(args, cfg):
    world = _world(cfg, train_dir=args.data)
    if args.style == "posterize":
        world.train_pairs = styled_pairs(world.train_pairs)
    run_dir = Path(str(args.out) + ".run")
    C.dump_config(cfg, run_dir / "config.yaml")
    st = run_pretrain(world, run_dir=run_dir, callback=_periodic(run_dir, args.ckpt_every, world, cfg, "base"))
    _save(args.out, st.model, world, cfg, "base", style=args.style)
    out = sample(st.model, world.codec, world.sched, None, [p.tags for p in world.train_pairs[:16]],
                 replace(C.sampler_from(cfg), ans=None), torch.Generator().manual_seed(cfg["seed"]),
                 latent_hw=tuple(s // world.codec.factor for s in world.train_pairs[0].hq.shape[:2]))
    write_png(run_dir / "samples.png", grid(to_uint8(out)))
    return [args.data], [args.out, run_dir]


def cmd_train(args, cfg):
    world = _world(cfg, train_dir=args.data)
    base = _model_from(args.base, world)
    run_dir = Path(str(args.out) + ".run")
    C.dump_config(cfg, run_dir / "config.yaml")
    st = run_train(world, base, args.variant, run_dir=run_dir, steps=args.steps,
                   callback=_periodic(run_dir, args.ckpt_every, world, cfg, "restoration"))
    _save(args.out, st.model, world, cfg, "restoration", variant=args.variant)
    return [args.data, args.base], [args.out, run_dir]


def _sampler(args, cfg):
    sc = C.sampler_from(cfg, negative=not args.no_negative)
    if args.alpha_bar_a is not None:
        sc = replace(sc, ans=AnsConfig(args.alpha_bar_a))
    if args.steps is not None:
        sc = replace(sc, num_steps=args.steps)
    if sc.guidance is not None and (args.omega is not None or args.negative_prompt is not None):
        g = sc.guidance
        sc = replace(sc, guidance=GuidanceConfig(
            omega=g.omega if args.omega is None else args.omega,
            rule=g.rule,
            negative_tokens=g.negative_tokens if args.negative_prompt is None else tuple(_split(args.negative_prompt)),
        ))
    return sc


def cmd_sample(args, cfg):
    world = _world(cfg)
    model = _with_base(_model_from(args.ckpt, world), args.base)
    sc = _sampler(args, cfg)
    lq = [read_png(p) for p in args.lq]
    tags = [_split(args.tags)] * len(lq)
    out = to_uint8(sample(model, world.codec, world.sched, to_tensor(lq), tags, sc, torch.Generator().manual_seed(cfg["seed"])))
    outs = []
    for path, img in zip(args.lq, out):
        dst = Path(args.out) / Path(path).name
        write_png(dst, img)
        outs.append(dst)
    return list(args.lq) + [args.ckpt] + ([args.base] if args.base else []), [args.out]


def cmd_eval(args, cfg):
    restored = sorted(Path(args.restored).glob("*.png"))
    if not restored:
        raise CliError("invalid-input", f"no PNG files in {args.restored}")
    records = []
    for p in restored:
        ref = Path(args.hq) / p.name
        if not ref.exists():
            raise CliError("io", f"no reference image {ref}")
        records.append(evaluate(p.stem, read_png(p), read_png(ref), args.alpha_bar_a if args.alpha_bar_a is not None else float("nan")))
    write_csv(records, args.out)
    return [args.restored, args.hq], [args.out]


def cmd_sweep(args, cfg):
    world = _world(cfg, test_dir=args.data)
    model = _with_base(_model_from(args.ckpt, world), args.base)
    values = [float(v) for v in _split(args.values)] if args.values else cfg["eval"]["alpha_grid"]
    recs = sweep_alpha_a(restorer(model, world.codec, world.sched), world.test_pairs, values,
                         C.sampler_from(cfg), seed=cfg["seed"], csv_path=args.out)
    tr = trend(recs)
    print(json.dumps({"spearman": tr["spearman"], "psnr": tr["psnr"], "sharpness": tr["sharpness"]}))
    return [args.ckpt, args.data], [args.out]


def cmd_ablate(args, cfg):
    world = _world(cfg, train_dir=args.data, test_dir=args.test_data)
    base = _model_from(args.base, world)
    variants = _split(args.variants) if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise CliError("invalid-input", f"unknown variant {v!r}")
    rows = run_ablation(world, base, variants, csv_path=args.out)
    for r in rows:
        print(f"{r['variant']:<13} psnr={r['psnr_y']:.3f} ssim={r['ssim']:.4f} runtime={r['runtime_s']:.4f}s")
    return [args.data, args.test_data, args.base], [args.out]


def cmd_swap_info(args, cfg):
    model = load_checkpoint(args.ckpt).tensors
    base = load_checkpoint(args.base).tensors
    report = {
        "frozen_base": len(model.names(FROZEN_BASE)),
        "trainable_added": len(model.names(TRAINABLE_ADDED)),
        "compatible": True,
        "problems": None,
    }
    try:
        swapped = swap_base(model, base)
        report["trainable_added_unchanged"] = swapped.equal(model, TRAINABLE_ADDED)
    except ValueError as exc:
        report["compatible"] = False
        report["problems"] = str(exc)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=1) + "\n")
    print(json.dumps(report))
    if not report["compatible"]:
        raise CliError("checkpoint", report["problems"])
    return [args.ckpt, args.base], [args.out]


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.lr=0.001")
    common.add_argument("--seed", type=int)
    common.add_argument("--toy", action="store_true", help="use the short 100-step noise schedule")
    common.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pixaware", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="render a synthetic texture dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--split", default="train")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("degrade", parents=[common], help="synthesize LQ images for a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train")
    s.set_defaults(fn=cmd_degrade)

    s = sub.add_parser("pretrain-base", parents=[common], help="train a base denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--style", choices=["posterize"], default=None)
    s.add_argument("--ckpt-every", type=int, default=0)
    s.set_defaults(fn=cmd_pretrain_base)

    s = sub.add_parser("train", parents=[common], help="train the restoration branch on a frozen base")
    s.add_argument("--data", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="full")
    s.add_argument("--steps", type=int)
    s.add_argument("--ckpt-every", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    def sampling_flags(s):
        s.add_argument("--ckpt", required=True)
        s.add_argument("--base", help="swap in this base checkpoint before sampling")
        s.add_argument("--steps", type=int)
        s.add_argument("--omega", type=float)
        s.add_argument("--negative-prompt", help="comma-separated tokens")
        s.add_argument("--no-negative", action="store_true", help="single pass per step, no guidance")

    s = sub.add_parser("sample", parents=[common], help="restore LQ images")
    sampling_flags(s)
    s.add_argument("--lq", nargs="+", required=True)
    s.add_argument("--tags", default="", help="comma-separated prompt tokens")
    s.add_argument("--alpha-bar-a", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="score restored images against references")
    s.add_argument("--restored", required=True)
    s.add_argument("--hq", required=True)
    s.add_argument("--alpha-bar-a", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="metrics over a grid of alpha_bar_a")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--base")
    s.add_argument("--data", required=True)
    s.add_argument("--values", help="comma-separated grid, default 0,0.1,0.5,1")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    s.add_argument("--data", required=True)
    s.add_argument("--test-data", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("swap-info", parents=[common], help="check whether a base can be swapped into a model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--base", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_swap_info)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    manifest_path = Path(args.manifest) if args.manifest else Path(str(args.out).rstrip("/") + ".manifest.json")
    started = time.time()
    cfg, inputs, outputs, err = {}, [], [], None
    try:
        cfg = _config(args)
        inputs, outputs = args.fn(args, cfg)
    except Exception as exc:  # reported as one machine-parsable line
        err = exc
    m = RunManifest(
        command=args.command,
        argv=argv,
        config=cfg,
        config_digest=C.digest(cfg),
        seed=int(cfg.get("seed", -1)) if cfg else -1,
        inputs={str(p): "" for p in inputs if p},
        outputs={k: v for p in outputs for k, v in hash_tree(p).items()},
        started=started,
        duration_s=time.time() - started,
        status="ok" if err is None else "error",
        error=None if err is None else f"{_category(err)}: {err}",
    )
    try:
        write_manifest(m, manifest_path)
    except OSError as exc:
        err = err or exc
    if err is not None:
        msg = " ".join(str(err).split()) or type(err).__name__
        print(f"error: {_category(err)}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
