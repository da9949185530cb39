"""Per-invocation run manifests, written atomically next to the output."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__
from .config import digest


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    config_digest: str
    seed: int
    code_version: str = __version__
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    started: float = 0.0
    duration_s: float = 0.0
    status: str = "ok"
    error: Optional[str] = None


def _sha_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(path) -> Dict[str, str]:
    """sha256 of a file, or of every file under a directory."""
    path = Path(path)
    if path.is_file():
        return {str(path): _sha_file(path)}
    if path.is_dir():
        return {str(p): _sha_file(p) for p in sorted(path.rglob("*")) if p.is_file()}
    return {}


def write_manifest(m: RunManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(asdict(m), fh, indent=1, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def verify_manifest(path) -> List[str]:
    """Problems found when re-checking a manifest; empty when consistent."""
    m = json.loads(Path(path).read_text())
    problems = []
    if digest(m["config"]) != m["config_digest"]:
        problems.append("config digest does not recompute")
    for f, sha in m["outputs"].items():
        if not Path(f).is_file():
            problems.append(f"missing {f}")
        elif _sha_file(Path(f)) != sha:
            problems.append(f"hash mismatch {f}")
    return problems
