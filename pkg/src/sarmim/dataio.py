"""Image file formats and dataset directory layout.

Two on-disk image formats are supported:

* ``.f32``: raw little-endian 32-bit floats, row-major, with a sidecar
  ``<name>.json`` holding ``{height, width, scale}``. Stored values times
  ``scale`` give amplitudes.
* 16-bit grayscale ``.png``: amplitudes quantized by a stored scale factor
  (same sidecar convention), so ``amplitude = pixel * scale``.

Datasets live under ``<root>/<split>/<class_name>/<image files>``; unlabeled
pretraining corpora use a single ``unlabeled/`` class folder.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError
from .util import read_json, write_json

UNLABELED_CLASS = "unlabeled"


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def write_f32(path: str | Path, img: np.ndarray, scale: float = 1.0) -> None:
    path = Path(path)
    data = np.ascontiguousarray(img, dtype=np.float32) / np.float32(scale)
    path.write_bytes(data.astype("<f4").tobytes())
    write_json(_sidecar(path), {"height": img.shape[0], "width": img.shape[1],
                                "scale": scale})


def read_f32(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = read_json(_sidecar(path))
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    expected = meta["height"] * meta["width"]
    if raw.size != expected:
        raise ValidationError(
            f"{path}: expected {expected} values, file holds {raw.size}")
    img = raw.reshape(meta["height"], meta["width"]).astype(np.float32)
    return img * np.float32(meta["scale"])


def write_png16(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    peak = float(img.max())
    scale = peak / 65535.0 if peak > 0 else 1.0
    quantized = np.clip(np.round(img / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(quantized).save(path)
    write_json(_sidecar(path), {"height": img.shape[0], "width": img.shape[1],
                                "scale": scale})


def read_png16(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = read_json(_sidecar(path))
    arr = np.asarray(Image.open(path), dtype=np.float32)
    return (arr * np.float32(meta["scale"])).astype(np.float32)


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".f32":
        return read_f32(path)
    if path.suffix == ".png":
        return read_png16(path)
    raise ValidationError(f"unsupported image format: {path}")


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".f32":
        write_f32(path, img)
    elif path.suffix == ".png":
        write_png16(path, img)
    else:
        raise ValidationError(f"unsupported image format: {path}")


def save_dataset(root: str | Path, split: str, images: list[np.ndarray],
                 labels: list[int], class_names: list[str],
                 fmt: str = "f32") -> Path:
    """Write images into the ``<root>/<split>/<class>/`` layout."""
    if fmt not in ("f32", "png"):
        raise ValidationError(f"unsupported dataset format: {fmt}")
    split_dir = Path(root) / split
    counters = [0] * len(class_names)
    for img, label in zip(images, labels):
        cls_dir = split_dir / class_names[label]
        cls_dir.mkdir(parents=True, exist_ok=True)
        name = f"img_{counters[label]:05d}.{fmt}"
        counters[label] += 1
        write_image(cls_dir / name, img)
    return split_dir


def load_dataset(root: str | Path, split: str | None = None
                 ) -> tuple[list[np.ndarray], np.ndarray, list[str]]:
    """Load a dataset split; returns (images, labels, class_names).

    ``split`` may be omitted when ``root`` already points at a split
    directory. Class order (and therefore label assignment) is the sorted
    class folder names.
    """
    split_dir = Path(root) / split if split else Path(root)
    if not split_dir.is_dir():
        raise ValidationError(f"dataset split not found: {split_dir}")
    class_names = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    if not class_names:
        raise ValidationError(f"no class folders under {split_dir}")
    images: list[np.ndarray] = []
    labels: list[int] = []
    for label, cls in enumerate(class_names):
        files = sorted(p for p in (split_dir / cls).iterdir()
                       if p.suffix in (".f32", ".png"))
        for f in files:
            images.append(read_image(f))
            labels.append(label)
    if not images:
        raise ValidationError(f"no images under {split_dir}")
    return images, np.asarray(labels, dtype=np.int64), class_names
