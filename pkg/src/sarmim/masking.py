"""Window sampling and mask plans over the patch grid.

Local plans draw k square windows uniformly over all valid top-left
positions (overlap permitted) and mask a fixed fraction of the patches
inside each window. Global plans are the degenerate case of one window
covering the whole grid. The masked count per window is
``round_half_up(mask_ratio * w**2)`` so token counts are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PatchGrid:
    rows: int
    cols: int
    patch_side: int

    @classmethod
    def for_image(cls, height: int, width: int, patch_side: int) -> "PatchGrid":
        if height % patch_side or width % patch_side:
            raise ValidationError(
                f"image {height}x{width} not divisible by patch side {patch_side}")
        return cls(height // patch_side, width // patch_side, patch_side)

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.patch_side < 1:
            raise ValidationError(f"degenerate patch grid: {self}")


@dataclass
class MaskPlan:
    """Masked/visible patch assignment for the windows of one image.

    ``windows`` holds (top, left, side) in patch coordinates; ``masked``
    holds, per window, the sorted window-relative indices (row-major
    within the window) of masked patches.
    """

    mode: str
    windows: list[tuple[int, int, int]]
    masked: list[list[int]]
    mask_ratio: float
    seed: int

    def visible(self, window_index: int) -> list[int]:
        side = self.windows[window_index][2]
        masked = set(self.masked[window_index])
        return [i for i in range(side * side) if i not in masked]

    def mask_bool(self, window_index: int) -> np.ndarray:
        side = self.windows[window_index][2]
        out = np.zeros(side * side, dtype=bool)
        out[self.masked[window_index]] = True
        return out

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "windows": [list(w) for w in self.windows],
            "masked": self.masked,
            "mask_ratio": self.mask_ratio,
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        obj = json.loads(text)
        return cls(mode=obj["mode"],
                   windows=[tuple(w) for w in obj["windows"]],
                   masked=[list(m) for m in obj["masked"]],
                   mask_ratio=obj["mask_ratio"],
                   seed=obj["seed"])


def masked_count(mask_ratio: float, window_side: int) -> int:
    """Round-half-up count of masked patches in one window."""
    return int(math.floor(mask_ratio * window_side * window_side + 0.5))


def sample_local_windows(grid: PatchGrid, k: int, w: int,
                         seed: int) -> list[tuple[int, int, int]]:
    """k window top-lefts drawn uniformly over all valid positions."""
    grid.validate()
    if k < 1:
        raise ValidationError(f"window count must be >= 1, got {k}")
    if w < 1 or w > min(grid.rows, grid.cols):
        raise ValidationError(
            f"window side {w} does not fit a {grid.rows}x{grid.cols} patch grid")
    rng = np.random.default_rng(seed)
    windows = []
    for _ in range(k):
        top = int(rng.integers(0, grid.rows - w + 1))
        left = int(rng.integers(0, grid.cols - w + 1))
        windows.append((top, left, w))
    return windows


def mask_plan(windows: list[tuple[int, int, int]], mask_ratio: float,
              seed: int, mode: str = "local") -> MaskPlan:
    """Mask a uniformly random exact-count subset of each window."""
    if not 0 <= mask_ratio <= 1:
        raise ValidationError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    if not windows:
        raise ValidationError("mask plan needs at least one window")
    rng = np.random.default_rng(seed)
    masked = []
    for _, _, side in windows:
        m = masked_count(mask_ratio, side)
        chosen = rng.permutation(side * side)[:m]
        masked.append(sorted(int(i) for i in chosen))
    return MaskPlan(mode=mode, windows=list(windows), masked=masked,
                    mask_ratio=mask_ratio, seed=seed)


def global_mask_plan(grid: PatchGrid, mask_ratio: float, seed: int) -> MaskPlan:
    """One full-grid window with random masking (square grids only)."""
    grid.validate()
    if grid.rows != grid.cols:
        raise ValidationError(
            f"global masking needs a square patch grid, got {grid.rows}x{grid.cols}")
    return mask_plan([(0, 0, grid.rows)], mask_ratio, seed, mode="global")
