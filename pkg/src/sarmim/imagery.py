"""Synthetic speckled-scene generation and the pretraining augmentation pipeline.

Images are plain 2-D float32 numpy arrays of non-negative amplitude values.
Scene generation draws one of five shape classes over uniform clutter,
multiplies the squared reflectivity by unit-mean gamma speckle, and takes
the amplitude square root. All randomness is keyed by explicit seeds so
every operation is a pure function of (inputs, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .util import derive_seed

SHAPE_CLASSES = ("rectangle", "ellipse", "cross", "lshape", "twoblob")

_FIT_RETRIES = 50
_MIN_SHAPE_AREA = 16  # pixels; smaller shapes drown in single-look speckle


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for one synthetic scene.

    ``target_reflectivity`` and ``clutter_reflectivity`` are amplitudes;
    the speckle model squares them to intensity internally. ``size_range``
    is the shape's half-extent as a fraction of the image side,
    ``center_margin`` keeps shape centers away from the borders, and
    ``orientation_range`` is in degrees.
    """

    image_size: int = 64
    class_id: int = 0
    target_reflectivity: float = 2.5
    clutter_reflectivity: float = 1.0
    looks: int = 1
    size_range: tuple[float, float] = (0.14, 0.30)
    orientation_range: tuple[float, float] = (0.0, 180.0)
    center_margin: float = 0.18

    def validate(self) -> None:
        if not (self.target_reflectivity > self.clutter_reflectivity > 0):
            raise ValidationError(
                "require target_reflectivity > clutter_reflectivity > 0, got "
                f"{self.target_reflectivity} and {self.clutter_reflectivity}"
            )
        if self.looks < 1:
            raise ValidationError(f"looks must be >= 1, got {self.looks}")
        if not 0 <= self.class_id < len(SHAPE_CLASSES):
            raise ValidationError(f"class_id out of range: {self.class_id}")
        if self.image_size < 16:
            raise ValidationError(f"image_size too small: {self.image_size}")
        lo, hi = self.size_range
        if not (0 < lo <= hi < 0.5):
            raise ValidationError(f"size_range invalid: {self.size_range}")


@dataclass(frozen=True)
class AugConfig:
    """Random resized crop, horizontal flip, and contrast jitter settings."""

    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    hflip_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.5, 1.5)

    def validate(self) -> None:
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValidationError(f"crop_scale_range invalid: {self.crop_scale_range}")
        if not 0 <= self.hflip_prob <= 1:
            raise ValidationError(f"hflip_prob invalid: {self.hflip_prob}")
        clo, chi = self.contrast_range
        if not (0 < clo <= chi):
            raise ValidationError(f"contrast_range invalid: {self.contrast_range}")


def validate_amplitude(img: np.ndarray) -> None:
    """Check the amplitude-raster invariants: 2-D, finite, non-negative."""
    if img.ndim != 2:
        raise ValidationError(f"amplitude image must be 2-D, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValidationError("amplitude image contains non-finite values")
    if (img < 0).any():
        raise ValidationError("amplitude image contains negative values")


# ---------------------------------------------------------------------------
# Shape rendering


def _shape_mask(class_id: int, size: int, rng: np.random.Generator,
                half_extent: float, cx: float, cy: float, angle_deg: float) -> np.ndarray:
    """Boolean membership mask for one posed shape instance.

    Membership is tested in the shape frame: pixel offsets are rotated by
    ``-angle`` so ``u`` runs along the shape's major axis.
    """
    y, x = np.mgrid[0:size, 0:size]
    dx = x - cx
    dy = y - cy
    t = math.radians(angle_deg)
    u = math.cos(t) * dx + math.sin(t) * dy
    v = -math.sin(t) * dx + math.cos(t) * dy
    a = half_extent

    name = SHAPE_CLASSES[class_id]
    if name == "rectangle":
        b = a * rng.uniform(0.35, 0.7)
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if name == "ellipse":
        b = a * rng.uniform(0.35, 0.7)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if name == "cross":
        t_half = max(1.0, a * rng.uniform(0.18, 0.32))
        return ((np.abs(u) <= a) & (np.abs(v) <= t_half)) | (
            (np.abs(v) <= a) & (np.abs(u) <= t_half))
    if name == "lshape":
        t_full = max(2.0, a * rng.uniform(0.4, 0.65))
        bar_h = (np.abs(u) <= a) & (v >= -a) & (v <= -a + t_full)
        bar_v = (np.abs(v) <= a) & (u >= -a) & (u <= -a + t_full)
        return bar_h | bar_v
    if name == "twoblob":
        radius = a * rng.uniform(0.38, 0.48)
        gap = a - radius
        blob1 = (u - gap) ** 2 + v ** 2 <= radius ** 2
        blob2 = (u + gap) ** 2 + v ** 2 <= radius ** 2
        return blob1 | blob2
    raise ValidationError(f"unknown class_id {class_id}")


def scene_reflectivity(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render a noise-free reflectivity map and its shape mask.

    Pose (half-extent, orientation, center) is sampled from the spec's
    geometry ranges; poses whose mask touches the border or degenerates
    are rejected and resampled up to a bounded retry count.

    Returns
    -------
    (reflectivity, mask)
        ``reflectivity`` is float32 (size, size); ``mask`` is boolean.
    """
    spec.validate()
    rng = np.random.default_rng(derive_seed(seed, "scene"))
    size = spec.image_size
    for _ in range(_FIT_RETRIES):
        half_extent = rng.uniform(*spec.size_range) * size
        angle = rng.uniform(*spec.orientation_range)
        margin = spec.center_margin * size
        cx = rng.uniform(margin, size - 1 - margin)
        cy = rng.uniform(margin, size - 1 - margin)
        mask = _shape_mask(spec.class_id, size, rng, half_extent, cx, cy, angle)
        if mask.sum() < _MIN_SHAPE_AREA:
            continue
        border = np.zeros((size, size), dtype=bool)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        if (mask & border).any():
            continue
        refl = np.full((size, size), spec.clutter_reflectivity, dtype=np.float32)
        refl[mask] = spec.target_reflectivity
        return refl, mask
    raise ValidationError(
        f"could not fit a {SHAPE_CLASSES[spec.class_id]} inside a "
        f"{size}x{size} image after {_FIT_RETRIES} attempts"
    )


def apply_speckle(reflectivity: np.ndarray, looks: int, seed: int) -> np.ndarray:
    """Multiply squared reflectivity by L-look gamma speckle, return amplitude.

    The intensity multiplier ``n`` is i.i.d. gamma with shape ``looks`` and
    scale ``1/looks`` (unit mean, variance ``1/looks``); the output amplitude
    is ``sqrt(reflectivity**2 * n)``. The noise field depends only on
    (shape, looks, seed), so scaling the reflectivity scales the output.
    """
    validate_amplitude(reflectivity)
    if looks < 1:
        raise ValidationError(f"looks must be >= 1, got {looks}")
    rng = np.random.default_rng(seed)
    n = rng.gamma(shape=float(looks), scale=1.0 / looks, size=reflectivity.shape)
    return (reflectivity * np.sqrt(n)).astype(np.float32)


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, int]:
    """One speckled scene and its class label, deterministic per (spec, seed)."""
    refl, _ = scene_reflectivity(spec, seed)
    img = apply_speckle(refl, spec.looks, derive_seed(seed, "speckle"))
    return img, spec.class_id


# ---------------------------------------------------------------------------
# Augmentation


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-center alignment.

    Same-size resampling maps each output pixel exactly onto its source
    pixel, so it is an exact identity.
    """
    in_h, in_w = img.shape
    src_y = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    src_y = np.clip(src_y, 0, in_h - 1)
    src_x = np.clip(src_x, 0, in_w - 1)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (src_y - y0)[:, None]
    fx = (src_x - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _sample_crop(rng: np.random.Generator, h: int, w: int,
                 scale_range: tuple[float, float]) -> tuple[int, int, int, int]:
    """Sample a crop box (top, left, height, width).

    Area fraction is uniform in ``scale_range``, aspect ratio log-uniform
    in [3/4, 4/3]. A candidate is accepted only if its real-valued extent
    fits the image, which makes an area fraction of exactly 1 always fall
    through to the full-image fallback.
    """
    area = float(h * w)
    log_lo, log_hi = math.log(3.0 / 4.0), math.log(4.0 / 3.0)
    for _ in range(10):
        target_area = rng.uniform(*scale_range) * area
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        crop_w = math.sqrt(target_area * ratio)
        crop_h = math.sqrt(target_area / ratio)
        if crop_w <= w and crop_h <= h:
            cw = max(1, round(crop_w))
            ch = max(1, round(crop_h))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def augment(img: np.ndarray, cfg: AugConfig, seed: int) -> np.ndarray:
    """Random resized crop, horizontal flip, then mean-anchored contrast.

    Contrast scales deviations from the image mean by a factor uniform in
    ``contrast_range`` and clamps at zero, so constant images and factor 1
    are exact fixed points. Deterministic per (img, cfg, seed).
    """
    cfg.validate()
    validate_amplitude(img)
    rng = np.random.default_rng(seed)
    h, w = img.shape

    top, left, ch, cw = _sample_crop(rng, h, w, cfg.crop_scale_range)
    out = img[top:top + ch, left:left + cw]
    if (ch, cw) != (h, w):
        out = _resize_bilinear(out.astype(np.float64), h, w)
    else:
        out = out.astype(np.float64)

    if rng.random() < cfg.hflip_prob:
        out = out[:, ::-1]

    f = rng.uniform(*cfg.contrast_range)
    if f != 1.0:
        mean = out.mean()
        out = np.clip(mean + f * (out - mean), 0.0, None)

    return np.ascontiguousarray(out, dtype=np.float32)
