"""Checkpoint archives: a directory of ``.npy`` tensors plus a JSON manifest.

Layout::

    manifest.json          names, shapes, dtypes, partition labels, hashes, config digest
    tensors/<name>.npy     one file per named tensor
    codec/basis.npy        codec projection basis
    schedule/alpha_bars.npy
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import Denoiser, ModelConfig, RestorationModel, TensorMap
from .codec import Codec
from .config import digest
from .schedules import NoiseSchedule

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: TensorMap
    codec: Codec
    sched: NoiseSchedule
    config: dict

    def build_model(self) -> Denoiser:
        mcfg = ModelConfig(**self.config["model_config"])
        cls = RestorationModel if self.config.get("kind", "restoration") == "restoration" else Denoiser
        with torch.random.fork_rng(devices=[]):
            model = cls(mcfg)
        self.tensors.load_into(model)
        return model


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _manifest_digest(m: dict) -> str:
    return digest({"config": m["config"], "codec": m["codec"], "schedule": m["schedule"], "tensors": m["tensors"]})


def save_checkpoint(path, tensors: TensorMap, codec: Codec, sched: NoiseSchedule, config: dict) -> Path:
    path = Path(path)
    files = {}
    entries = []
    for name in sorted(tensors.entries):
        arr = tensors[name].detach().cpu().numpy()
        blob = _npy_bytes(arr)
        rel = f"tensors/{name}.npy"
        files[rel] = blob
        entries.append(
            {
                "name": name,
                "file": rel,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "partition": tensors.partition[name],
                "sha256": _sha(blob),
            }
        )
    basis = _npy_bytes(codec.basis)
    files["codec/basis.npy"] = basis
    bars = _npy_bytes(np.asarray(sched.alpha_bars, dtype=np.float64))
    files["schedule/alpha_bars.npy"] = bars
    manifest = {
        "format": FORMAT_VERSION,
        "config": config,
        "codec": {**codec.state(), "basis_sha256": _sha(basis)},
        "schedule": {"n_steps": sched.n_steps, "rescaled": sched.rescaled, "alpha_bars_sha256": _sha(bars)},
        "tensors": entries,
    }
    manifest["config_digest"] = _manifest_digest(manifest)
    files["manifest.json"] = (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        for rel, blob in files.items():
            (tmp / rel).parent.mkdir(parents=True, exist_ok=True)
            (tmp / rel).write_bytes(blob)
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_checked(root: Path, rel: str, sha: str) -> np.ndarray:
    blob = (root / rel).read_bytes()
    if _sha(blob) != sha:
        raise CheckpointError(f"hash mismatch for {rel}")
    return np.load(io.BytesIO(blob), allow_pickle=False)


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no manifest in {root}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')}")
    if _manifest_digest(manifest) != manifest.get("config_digest"):
        raise CheckpointError(f"config digest mismatch in {root / 'manifest.json'}; refusing to load")

    entries, partition = {}, {}
    for e in manifest["tensors"]:
        arr = _read_checked(root, e["file"], e["sha256"])
        if list(arr.shape) != e["shape"] or str(arr.dtype) != e["dtype"]:
            raise CheckpointError(f"{e['name']}: stored array does not match manifest")
        entries[e["name"]] = torch.from_numpy(arr.copy())
        partition[e["name"]] = e["partition"]

    c = manifest["codec"]
    basis = _read_checked(root, "codec/basis.npy", c["basis_sha256"])
    codec = Codec(c["factor"], c["latent_channels"], seed=c["seed"], basis=basis)
    s = manifest["schedule"]
    bars = _read_checked(root, "schedule/alpha_bars.npy", s["alpha_bars_sha256"])
    sched = NoiseSchedule.from_alpha_bars(bars, rescaled=s["rescaled"])
    return Checkpoint(TensorMap(entries, partition), codec, sched, manifest["config"])


def archive_digest(path) -> str:
    """Hash of every file in a checkpoint directory, for byte-identity checks."""
    root = Path(path)
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()
