"""Pretraining target features: ratio-of-average gradients and ablation targets.

The main feature is the multi-scale ratio gradient: at each pixel, the
weighted mean amplitude of the half-window on one side is divided by the
mean on the opposite side, and the log of that ratio is the gradient
component. Because the ratio cancels any multiplicative factor, the
response is scale-invariant (constant false alarm rate under multiplicative
speckle), unlike differential gradients which scale with the signal.

Half-windows exclude the center row/column: for direction "horizontal",
the numerator half covers columns ``x+1..x+r``, rows ``y-r..y+r``; the
denominator is its mirror on the left. The vertical direction uses the
halves strictly below/above. Weights are uniform (``linear`` kernel) or a
2-D Gaussian restricted to each half and renormalized (``gaussian``
kernel). Borders are mirror-padded (reflection about the edge pixel,
without repeating it).

All computations run in float64; log-ratios near zero would lose the
1e-6 invariance budget in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError
from .imagery import validate_amplitude

DEFAULT_SCALES = (5, 9, 13, 17)
KERNEL_KINDS = ("linear", "gaussian")
HOG_BINS = 9

FEATURE_KINDS = ("pixel", "lpf", "hog", "sarhog", "grlin", "grgau")


@dataclass(frozen=True)
class RoaKernelBank:
    """Multi-scale half-window kernel configuration.

    ``scales`` are half-sizes ``r``; the full kernel is a square of odd
    side ``2r+1``. ``epsilon`` is added to the image once, before any
    averaging, to keep ratios finite on zero-valued pixels.
    """

    scales: tuple[int, ...] = DEFAULT_SCALES
    kernel_kind: str = "linear"
    epsilon: float = 1e-2

    def validate(self) -> None:
        if not self.scales:
            raise ValidationError("kernel bank needs at least one scale")
        if any(r < 1 for r in self.scales):
            raise ValidationError(f"all scales must be >= 1, got {self.scales}")
        if list(self.scales) != sorted(self.scales):
            raise ValidationError(f"scales must be ascending, got {self.scales}")
        if self.kernel_kind not in KERNEL_KINDS:
            raise ValidationError(f"kernel_kind must be one of {KERNEL_KINDS}")
        if self.epsilon < 0:
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")

    @staticmethod
    def gaussian_sigma(r: int) -> float:
        """Kernel-size-linked Gaussian width: sigma = 0.3*(r - 1) + 0.8."""
        return 0.3 * (r - 1) + 0.8


@dataclass(frozen=True)
class GradientField:
    """Per-pixel log-ratio gradients and their magnitude."""

    g_h: np.ndarray
    g_v: np.ndarray
    g_m: np.ndarray


def _check_scale_fits(shape: tuple[int, ...], r: int) -> None:
    h, w = shape[-2], shape[-1]
    if h < 2 * r + 1 or w < 2 * r + 1:
        raise ValidationError(
            f"scale too large for image: r={r} needs at least "
            f"{2 * r + 1}x{2 * r + 1}, got {h}x{w}")


def _half_weights(r: int, kernel_kind: str) -> tuple[np.ndarray, np.ndarray]:
    """1-D weight vectors (full-axis, positive-side-axis) for one half-window.

    The half-window weight at offset (da, db) factorizes as
    ``full[da] * side[db]``; both vectors already carry the normalization
    so the 2-D half-window weights sum to 1 and the weighted sum is a mean.
    """
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    if kernel_kind == "linear":
        full = np.ones(2 * r + 1) / (2 * r + 1)
        side = np.zeros(2 * r + 1)
        side[r + 1:] = 1.0 / r
        return full, side
    sigma = RoaKernelBank.gaussian_sigma(r)
    g = np.exp(-0.5 * (offsets / sigma) ** 2)
    full = g / g.sum()
    side = np.zeros(2 * r + 1)
    side[r + 1:] = g[r + 1:] / g[r + 1:].sum()
    return full, side


def _roa_ratios_nd(arr: np.ndarray, r: int, kernel_kind: str
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Half-window mean ratios for a stack of images, last two axes spatial.

    Separable correlations with per-pass mirror boundaries are exactly the
    2-D correlation on a mirror-padded image, because mirror reflection
    along one axis commutes with correlation along the other.
    """
    full, side = _half_weights(r, kernel_kind)
    side_flipped = side[::-1].copy()

    rows_smoothed = correlate1d(arr, full, axis=-2, mode="mirror")
    m_right = correlate1d(rows_smoothed, side, axis=-1, mode="mirror")
    m_left = correlate1d(rows_smoothed, side_flipped, axis=-1, mode="mirror")

    cols_smoothed = correlate1d(arr, full, axis=-1, mode="mirror")
    m_below = correlate1d(cols_smoothed, side, axis=-2, mode="mirror")
    m_above = correlate1d(cols_smoothed, side_flipped, axis=-2, mode="mirror")

    return m_right / m_left, m_below / m_above


def roa_ratios(img: np.ndarray, r: int, kernel_kind: str = "linear",
               epsilon: float = 1e-2) -> tuple[np.ndarray, np.ndarray]:
    """Half-window mean ratios (horizontal, vertical) at half-size ``r``.

    The horizontal ratio divides the right half-window mean by the left;
    the vertical ratio divides below by above. ``epsilon`` is added to the
    image first so zero-valued regions stay finite.
    """
    validate_amplitude(img)
    _check_scale_fits(img.shape, r)
    if kernel_kind not in KERNEL_KINDS:
        raise ValidationError(f"kernel_kind must be one of {KERNEL_KINDS}")
    shifted = img.astype(np.float64) + epsilon
    r1, r3 = _roa_ratios_nd(shifted[None], r, kernel_kind)
    return r1[0], r3[0]


def gr_single_scale(img: np.ndarray, r: int, kernel_kind: str = "linear",
                    epsilon: float = 1e-2) -> GradientField:
    """Log-ratio gradient field at one scale: g = ln(ratio), magnitude included."""
    r1, r3 = roa_ratios(img, r, kernel_kind, epsilon)
    g_h = np.log(r1)
    g_v = np.log(r3)
    return GradientField(g_h=g_h, g_v=g_v, g_m=np.sqrt(g_h ** 2 + g_v ** 2))


def multi_scale_target(img: np.ndarray, bank: RoaKernelBank) -> np.ndarray:
    """Stack gradient magnitudes over the bank's scales, ascending r.

    Returns (C, H, W) with one channel per scale.
    """
    bank.validate()
    validate_amplitude(img)
    _check_scale_fits(img.shape, max(bank.scales))
    return _multi_scale_target_nd(img[None].astype(np.float64), bank)[0]


def _multi_scale_target_nd(imgs: np.ndarray, bank: RoaKernelBank) -> np.ndarray:
    """Batched multi-scale gradient magnitudes: (N, H, W) -> (N, C, H, W)."""
    shifted = imgs + bank.epsilon
    channels = []
    for r in bank.scales:
        r1, r3 = _roa_ratios_nd(shifted, r, bank.kernel_kind)
        g_h = np.log(r1)
        g_v = np.log(r3)
        channels.append(np.sqrt(g_h ** 2 + g_v ** 2))
    return np.stack(channels, axis=1)


# ---------------------------------------------------------------------------
# Ablation target features


def pixel_target(img: np.ndarray) -> np.ndarray:
    """The image itself as a single-channel target."""
    validate_amplitude(img)
    return img.astype(np.float64)[None]


def lpf_target(img: np.ndarray, cutoff_fraction: float = 0.5) -> np.ndarray:
    """Low-pass the image in the Fourier domain, single channel.

    A frequency (u, v) survives when both axis indices, normalized by
    their Nyquist index, are at most ``cutoff_fraction``; a fraction of 1
    therefore keeps every representable frequency and reproduces the
    input. The real part of the inverse transform is returned.
    """
    validate_amplitude(img)
    if not 0 <= cutoff_fraction <= 1:
        raise ValidationError(f"cutoff_fraction must be in [0, 1], got {cutoff_fraction}")
    h, w = img.shape
    fu = np.abs(np.fft.fftfreq(h) * h) / (h / 2.0)
    fv = np.abs(np.fft.fftfreq(w) * w) / (w / 2.0)
    keep = (fu[:, None] <= cutoff_fraction) & (fv[None, :] <= cutoff_fraction)
    spectrum = np.fft.fft2(img.astype(np.float64))
    return np.real(np.fft.ifft2(spectrum * keep))[None]


def _diff_gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centered differences with mirror-padded borders."""
    padded = np.pad(img.astype(np.float64), 1, mode="reflect")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return gx, gy


def diff_gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Centered-difference gradient magnitude (scales with the signal)."""
    gx, gy = _diff_gradients(img)
    return np.sqrt(gx ** 2 + gy ** 2)


def _cell_histograms(gx: np.ndarray, gy: np.ndarray, cell: int,
                     bins: int) -> np.ndarray:
    """Magnitude-weighted orientation histograms per cell, L2-normalized.

    Orientations live on [0, 180); each vote is split bilinearly between
    the two nearest bin centers (centers at (b + 0.5) * 180/bins, wrapping
    circularly). Normalization divides by max(L2 norm, 1e-6) per cell.
    """
    h, w = gx.shape
    rows, cols = h // cell, w // cell
    mag = np.sqrt(gx ** 2 + gy ** 2)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0

    pos = ang / (180.0 / bins) - 0.5
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    lo_bin = lo % bins
    hi_bin = (lo + 1) % bins

    cell_row = (np.arange(h) // cell)[:, None] * np.ones(w, dtype=np.intp)
    cell_col = np.ones(h, dtype=np.intp)[:, None] * (np.arange(w) // cell)
    cell_idx = (cell_row * cols + cell_col).ravel()

    flat_lo = cell_idx * bins + lo_bin.ravel()
    flat_hi = cell_idx * bins + hi_bin.ravel()
    hist = np.bincount(flat_lo, weights=(mag * (1 - frac)).ravel(),
                       minlength=rows * cols * bins)
    hist += np.bincount(flat_hi, weights=(mag * frac).ravel(),
                        minlength=rows * cols * bins)
    hist = hist.reshape(rows, cols, bins)

    norms = np.sqrt((hist ** 2).sum(axis=-1, keepdims=True))
    return hist / np.maximum(norms, 1e-6)


def hog_target(img: np.ndarray, cell: int, bins: int = HOG_BINS,
               gradient_kind: str = "differential",
               bank: RoaKernelBank | None = None) -> np.ndarray:
    """Oriented-gradient histogram target, one plane per bin.

    ``differential`` uses centered differences on the image (bins
    channels); ``ratio`` uses the log-ratio gradients at every scale of
    ``bank`` (bins * scales channels). Cell histograms are replicated over
    their pixels so the output planes match the image size.
    """
    validate_amplitude(img)
    if img.shape[0] % cell or img.shape[1] % cell:
        raise ValidationError(
            f"image {img.shape} not divisible by cell size {cell}")
    if gradient_kind == "differential":
        grads = [_diff_gradients(img)]
    elif gradient_kind == "ratio":
        bank = bank or RoaKernelBank()
        bank.validate()
        grads = []
        for r in bank.scales:
            field = gr_single_scale(img, r, bank.kernel_kind, bank.epsilon)
            grads.append((field.g_h, field.g_v))
    else:
        raise ValidationError(f"unknown gradient_kind {gradient_kind!r}")

    planes = []
    for gx, gy in grads:
        hist = _cell_histograms(gx, gy, cell, bins)  # (rows, cols, bins)
        per_pixel = hist.repeat(cell, axis=0).repeat(cell, axis=1)
        planes.append(np.moveaxis(per_pixel, -1, 0))
    return np.concatenate(planes, axis=0)


# ---------------------------------------------------------------------------
# Patch tokenization


def patch_targets(tf: np.ndarray, p: int) -> np.ndarray:
    """Per-patch standardized target vectors.

    Each (patch, channel) block of p*p values is standardized by
    ``(x - mean) / sqrt(var + 1e-6)``; blocks with raw variance below
    1e-12 become all zeros. Vectors are flattened channel-major, so the
    output is (num_patches, C*p*p) with patches in row-major grid order.
    """
    blocks = _patch_blocks(tf[None], p)[0]  # (n_patches, C, p*p)
    mean = blocks.mean(axis=-1, keepdims=True)
    var = blocks.var(axis=-1, keepdims=True)
    std = (blocks - mean) / np.sqrt(var + 1e-6)
    std = np.where(var < 1e-12, 0.0, std)
    n_patches = std.shape[0]
    return std.reshape(n_patches, -1)


def _patch_blocks(tfs: np.ndarray, p: int) -> np.ndarray:
    """(N, C, H, W) -> (N, n_patches, C, p*p), patches in row-major order."""
    n, c, h, w = tfs.shape
    if h % p or w % p:
        raise ValidationError(f"feature planes {h}x{w} not divisible by patch side {p}")
    gr, gc = h // p, w // p
    blocks = tfs.reshape(n, c, gr, p, gc, p)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)  # (N, gr, gc, C, p, p)
    return blocks.reshape(n, gr * gc, c, p * p)


# ---------------------------------------------------------------------------
# Feature-kind dispatch used by the trainer and CLI


def compute_target(img: np.ndarray, kind: str, bank: RoaKernelBank,
                   patch_side: int) -> np.ndarray:
    """TargetFeature planes (C, H, W) for one feature kind."""
    if kind == "pixel":
        return pixel_target(img)
    if kind == "lpf":
        return lpf_target(img)
    if kind == "hog":
        return hog_target(img, cell=patch_side, gradient_kind="differential")
    if kind == "sarhog":
        return hog_target(img, cell=patch_side, gradient_kind="ratio", bank=bank)
    if kind == "grlin":
        return multi_scale_target(img, RoaKernelBank(bank.scales, "linear", bank.epsilon))
    if kind == "grgau":
        return multi_scale_target(img, RoaKernelBank(bank.scales, "gaussian", bank.epsilon))
    raise ValidationError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def target_dim(kind: str, patch_side: int, bank: RoaKernelBank,
               bins: int = HOG_BINS) -> int:
    """Per-patch target vector length for a feature kind."""
    if kind in ("pixel", "lpf"):
        return patch_side * patch_side
    if kind in ("grlin", "grgau"):
        return len(bank.scales) * patch_side * patch_side
    if kind == "hog":
        return bins
    if kind == "sarhog":
        return bins * len(bank.scales)
    raise ValidationError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")


def patch_target_vectors(tf: np.ndarray, p: int, kind: str) -> np.ndarray:
    """Per-patch target vectors for the training loss.

    Per-pixel features get per-patch standardization. Histogram features
    are cell-resolution (constant over each patch), where standardization
    would zero every block, so their per-patch vector is the cell's
    histogram itself (the per-channel patch mean).
    """
    if kind in ("hog", "sarhog"):
        return _patch_blocks(tf[None], p)[0].mean(axis=-1)
    return patch_targets(tf, p)


def batched_patch_target_vectors(imgs: np.ndarray, kind: str,
                                 bank: RoaKernelBank, p: int) -> np.ndarray:
    """Target vectors for a stack of images: (N, H, W) -> (N, n_patches, D).

    Matches a per-image ``compute_target`` + ``patch_target_vectors`` loop;
    the ratio-gradient path is vectorized across the stack because it
    dominates training time.
    """
    if kind in ("grlin", "grgau"):
        k = "linear" if kind == "grlin" else "gaussian"
        _check_scale_fits(imgs.shape, max(bank.scales))
        tfs = _multi_scale_target_nd(
            imgs.astype(np.float64), RoaKernelBank(bank.scales, k, bank.epsilon))
        blocks = _patch_blocks(tfs, p)
        mean = blocks.mean(axis=-1, keepdims=True)
        var = blocks.var(axis=-1, keepdims=True)
        std = (blocks - mean) / np.sqrt(var + 1e-6)
        std = np.where(var < 1e-12, 0.0, std)
        n, n_patches = std.shape[0], std.shape[1]
        return std.reshape(n, n_patches, -1)
    return np.stack([
        patch_target_vectors(compute_target(img, kind, bank, p), p, kind)
        for img in imgs
    ])
