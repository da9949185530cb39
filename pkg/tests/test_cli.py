import json
import subprocess
import sys

import pytest
import yaml

from pixaware.cli import main
from pixaware.manifest import verify_manifest

TINY = {
    "data": {"n": 8, "size": 16, "test_n": 2},
    "codec": {"factor": 2, "latent_channels": 12},
    "model": {"unet": {"base_width": 8, "channel_multipliers": [1, 2], "head_dim": 8, "context_dim": 8}, "dr_widths": [4, 4, 4]},
    "pretrain": {"steps": 2, "batch_size": 2, "log_every": 0},
    "train": {"steps": 2, "batch_size": 2, "log_every": 0},
    "sample": {"num_steps": 2},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.yaml").write_text(yaml.safe_dump(TINY))
    return d


def run(workdir, *args):
    return main([args[0], "--config", str(workdir / "cfg.yaml"), "--toy", *map(str, args[1:])])


def manifest(path):
    return json.loads((path.parent / (path.name + ".manifest.json")).read_text())


@pytest.fixture(scope="module")
def pipeline(workdir):
    w = workdir
    assert run(w, "gen-data", "--out", w / "train", "--n", 8) == 0
    assert run(w, "gen-data", "--out", w / "test", "--n", 2, "--split", "test") == 0
    assert run(w, "degrade", "--data", w / "test", "--out", w / "test-pairs", "--split", "test") == 0
    assert run(w, "pretrain-base", "--data", w / "train", "--out", w / "base") == 0
    assert run(w, "pretrain-base", "--data", w / "train", "--out", w / "style", "--style", "posterize") == 0
    assert run(w, "train", "--data", w / "train", "--base", w / "base", "--out", w / "model", "--ckpt-every", 1) == 0
    return w


def test_gen_data_and_degrade(pipeline):
    w = pipeline
    assert len(list((w / "train" / "hq").iterdir())) == 8
    lines = (w / "test-pairs" / "pairs.csv").read_text().splitlines()
    assert lines[0] == "file,lq_file,family,tags,seed,recipe" and len(lines) == 3
    assert "upsample=bicubic" in lines[1]


def test_manifests_consistent(pipeline):
    w = pipeline
    for out in ("train", "test-pairs", "base", "model"):
        m = manifest(w / out)
        assert m["status"] == "ok" and m["code_version"]
        assert verify_manifest(w / (out + ".manifest.json")) == []
    assert (w / "model.run" / "loss.csv").exists()
    assert (w / "model.run" / "ckpt-000002" / "manifest.json").exists()


def test_sample_eval_sweep(pipeline):
    w = pipeline
    lq = sorted((w / "test-pairs" / "lq").iterdir())
    args = ["--ckpt", w / "model", "--lq", *lq, "--alpha-bar-a", 0.5, "--steps", 2, "--omega", 3.0,
            "--negative-prompt", "noisy,blurry", "--tags", "stripes", "--seed", 3]
    assert run(w, "sample", *args, "--out", w / "restored") == 0
    assert run(w, "sample", *args, "--out", w / "restored2") == 0
    for f in lq:
        assert (w / "restored" / f.name).read_bytes() == (w / "restored2" / f.name).read_bytes()
    assert run(w, "sample", *args, "--base", w / "style", "--out", w / "restored-style") == 0
    assert run(w, "eval", "--restored", w / "restored", "--hq", w / "test-pairs" / "hq", "--out", w / "m.csv") == 0
    assert (w / "m.csv").read_text().splitlines()[0] == "image_id,alpha_bar_a,psnr_y,ssim,sharpness"
    assert run(w, "sweep", "--ckpt", w / "model", "--data", w / "test-pairs", "--values", "0,1", "--out", w / "sweep.csv") == 0
    rows = (w / "sweep.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2


def test_swap_info(pipeline, capsys):
    w = pipeline
    assert run(w, "swap-info", "--ckpt", w / "model", "--base", w / "style", "--out", w / "swap.json") == 0
    report = json.loads((w / "swap.json").read_text())
    assert report["compatible"] and report["trainable_added_unchanged"]


def test_ablate(pipeline):
    w = pipeline
    assert run(w, "ablate", "--data", w / "train", "--test-data", w / "test-pairs", "--base", w / "base",
               "--variants", "full,no_negative", "--out", w / "ablation.csv") == 0
    lines = (w / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("variant,paca,degradation_removal,high_level,negative_prompt")
    assert [l.split(",")[0] for l in lines[1:]] == ["full", "no_negative"]


def test_errors_are_single_line(pipeline, capsys):
    w = pipeline
    code = run(w, "train", "--data", w / "train", "--base", w / "nowhere", "--out", w / "bad")
    err = capsys.readouterr().err.strip().splitlines()
    assert code != 0 and len(err) == 1 and err[0].startswith("error: checkpoint: ")
    assert manifest(w / "bad")["status"] == "error"

    code = main(["gen-data", "--out", str(w / "x"), "--set", "novalue"])
    assert code != 0 and capsys.readouterr().err.startswith("error: config: ")

    # mismatched schedule: the base was trained with the short schedule
    code = main(["train", "--config", str(w / "cfg.yaml"), "--data", str(w / "train"), "--base", str(w / "base"), "--out", str(w / "bad2")])
    assert code != 0 and "schedule" in capsys.readouterr().err


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "pixaware.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "degrade", "pretrain-base", "train", "sample", "eval", "sweep", "ablate", "swap-info"):
        assert cmd in out.stdout
