"""Seed derivation, content hashing, and small file helpers."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable

import numpy as np

_SEP = b"\x1f"


def derive_seed(*parts: object) -> int:
    """Derive a stable 64-bit seed from arbitrary parts via SHA-256.

    The derivation is independent of process, platform, and call order
    elsewhere in the program, so each consumer (one image, one epoch,
    one split) owns an independent random stream.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(_SEP)
    return int.from_bytes(h.digest()[:8], "little")


def rng_from(*parts: object) -> np.random.Generator:
    """A fresh numpy Generator keyed by ``derive_seed(*parts)``."""
    return np.random.default_rng(derive_seed(*parts))


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_paths(paths: Iterable[str | Path]) -> str:
    """Content hash over files and directories (recursive, name-ordered).

    Covers both the relative file names and their bytes, so renames and
    edits both change the hash.
    """
    h = hashlib.sha256()
    for path in paths:
        path = Path(path)
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file())
            base = path
        elif path.is_file():
            files = [path]
            base = path.parent
        else:
            h.update(f"missing:{path}".encode())
            h.update(_SEP)
            continue
        for f in files:
            h.update(str(f.relative_to(base)).encode())
            h.update(_SEP)
            h.update(f.read_bytes())
            h.update(_SEP)
    return h.hexdigest()


def write_json(path: str | Path, obj: object) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write-temp-then-rename so readers never observe a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
