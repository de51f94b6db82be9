"""Pretraining loop: augmentation, target computation, mask sampling,
AdamW with warmup-cosine schedule, checkpointing, and collapse diagnostics.

Every random choice derives from (config seed, role, epoch, index), so runs
are reproducible bit-for-bit on one platform regardless of batch layout,
and a sample's preparation can be replayed in isolation.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DivergenceError, ValidationError
from .features import (FEATURE_KINDS, RoaKernelBank, batched_patch_target_vectors,
                       compute_target, patch_target_vectors, target_dim)
from .imagery import AugConfig, augment
from .masking import (MaskPlan, PatchGrid, global_mask_plan, mask_plan,
                      sample_local_windows)
from .model import (MaskedPredictor, ModelConfig, build_model, save_checkpoint,
                    window_losses)
from .util import derive_seed

RUNLOG_COLUMNS = ("epoch", "loss", "lr", "seconds", "pred_variance")
COLLAPSE_THRESHOLD = 1e-4


@dataclass(frozen=True)
class PretrainConfig:
    """Desk-scale defaults; the original-recipe values are 200 epochs,
    warmup 20, batch 300 (selectable via the CLI's paper-faithful flag)."""

    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    batch_size: int = 32
    epochs: int = 50
    warmup_epochs: int = 5
    windows_per_image: int = 4
    window_side: int = 4
    mask_mode: str = "local"
    mask_ratio: float = 0.75
    target_kind: str = "grlin"
    scales: tuple[int, ...] = (5, 9, 13, 17)
    epsilon: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 0
    aug: AugConfig = field(default_factory=AugConfig)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.warmup_epochs < self.epochs:
            raise ValidationError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.mask_mode not in ("local", "global"):
            raise ValidationError(f"mask_mode must be local or global, got {self.mask_mode}")
        if not 0 <= self.mask_ratio <= 1:
            raise ValidationError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.target_kind not in FEATURE_KINDS:
            raise ValidationError(
                f"target_kind {self.target_kind!r} not one of {FEATURE_KINDS}")
        if self.windows_per_image < 1:
            raise ValidationError(
                f"windows_per_image must be >= 1, got {self.windows_per_image}")
        self.aug.validate()

    @property
    def peak_lr(self) -> float:
        """Linear scaling rule: lr = base_lr * batch_size / 256."""
        return self.base_lr * self.batch_size / 256.0

    def bank(self) -> RoaKernelBank:
        return RoaKernelBank(scales=tuple(self.scales), kernel_kind="linear",
                             epsilon=self.epsilon)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float
    pred_variance: float

    @property
    def collapse_flagged(self) -> bool:
        return self.pred_variance < COLLAPSE_THRESHOLD


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(RUNLOG_COLUMNS)
            for rec in self.records:
                writer.writerow([rec.epoch, repr(rec.loss), repr(rec.lr),
                                 repr(rec.seconds), repr(rec.pred_variance)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RunLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.records.append(EpochRecord(
                    epoch=int(row["epoch"]), loss=float(row["loss"]),
                    lr=float(row["lr"]), seconds=float(row["seconds"]),
                    pred_variance=float(row["pred_variance"])))
        return log


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup to ``peak_lr`` then half-cosine decay to ~0."""
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


# ---------------------------------------------------------------------------
# Sample preparation


@dataclass
class WindowBatch:
    """Token-window tensors for a set of windows.

    ``patches`` (N, T, p²) float32 pixel blocks, ``targets`` (N, T, D)
    float32, ``masked`` (N, T) bool; windows of possibly many images are
    stacked along N.
    """

    patches: torch.Tensor
    targets: torch.Tensor
    masked: torch.Tensor


def _image_patches(img: np.ndarray, p: int) -> np.ndarray:
    """(H, W) -> (n_patches, p²), patches in row-major grid order."""
    h, w = img.shape
    blocks = img.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3)
    return blocks.reshape(-1, p * p)


def _plan_for(grid: PatchGrid, cfg: PretrainConfig, sample_seed: int) -> MaskPlan:
    if cfg.mask_mode == "global":
        return global_mask_plan(grid, cfg.mask_ratio, derive_seed(sample_seed, "mask"))
    windows = sample_local_windows(grid, cfg.windows_per_image, cfg.window_side,
                                   derive_seed(sample_seed, "windows"))
    return mask_plan(windows, cfg.mask_ratio, derive_seed(sample_seed, "mask"))


def _window_token_indices(plan: MaskPlan, grid: PatchGrid) -> np.ndarray:
    """Flat patch-grid indices of each window's tokens: (k, T)."""
    rows = []
    for top, left, side in plan.windows:
        r = np.arange(top, top + side)
        c = np.arange(left, left + side)
        rows.append((r[:, None] * grid.cols + c[None, :]).reshape(-1))
    return np.stack(rows)


def _sample_geometry(aug: np.ndarray, vecs: np.ndarray, cfg: PretrainConfig,
                     grid: PatchGrid, sample_seed: int
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray, MaskPlan]:
    plan = _plan_for(grid, cfg, sample_seed)
    idx = _window_token_indices(plan, grid)
    pixel_patches = _image_patches(aug, grid.patch_side)
    patches = pixel_patches[idx]
    targets = vecs[idx]
    masked = np.stack([plan.mask_bool(i) for i in range(len(plan.windows))])
    return patches, targets, masked, plan


def prepare_sample(img: np.ndarray, cfg: PretrainConfig, grid: PatchGrid,
                   sample_seed: int
                   ) -> tuple[WindowBatch, MaskPlan]:
    """Augment one image, compute its targets, and cut token windows.

    Deterministic per (img, cfg, sample_seed): identical inputs give
    identical window tensors and plans.
    """
    aug = augment(img, cfg.aug, derive_seed(sample_seed, "aug"))
    bank = cfg.bank()
    tf = compute_target(aug, cfg.target_kind, bank, grid.patch_side)
    vecs = patch_target_vectors(tf, grid.patch_side, cfg.target_kind)
    patches, targets, masked, plan = _sample_geometry(
        aug, vecs.astype(np.float32), cfg, grid, sample_seed)
    batch = WindowBatch(
        patches=torch.from_numpy(np.ascontiguousarray(patches, dtype=np.float32)),
        targets=torch.from_numpy(np.ascontiguousarray(targets, dtype=np.float32)),
        masked=torch.from_numpy(masked),
    )
    return batch, plan


def _prepare_minibatch(images: list[np.ndarray], indices: np.ndarray, epoch: int,
                       cfg: PretrainConfig, grid: PatchGrid) -> WindowBatch:
    """Batched version of ``prepare_sample`` over ``indices``.

    Target features are computed for the whole stack at once (identical
    arithmetic to the per-sample path); geometry stays per sample.
    """
    seeds = [derive_seed(cfg.seed, "sample", epoch, int(i)) for i in indices]
    augs = np.stack([
        augment(images[int(i)], cfg.aug, derive_seed(s, "aug"))
        for i, s in zip(indices, seeds)
    ])
    vecs = batched_patch_target_vectors(augs, cfg.target_kind, cfg.bank(),
                                        grid.patch_side).astype(np.float32)
    all_patches, all_targets, all_masked = [], [], []
    for row, s in enumerate(seeds):
        patches, targets, masked, _ = _sample_geometry(
            augs[row], vecs[row], cfg, grid, s)
        all_patches.append(patches)
        all_targets.append(targets)
        all_masked.append(masked)
    return WindowBatch(
        patches=torch.from_numpy(np.ascontiguousarray(
            np.concatenate(all_patches), dtype=np.float32)),
        targets=torch.from_numpy(np.ascontiguousarray(
            np.concatenate(all_targets), dtype=np.float32)),
        masked=torch.from_numpy(np.concatenate(all_masked)),
    )


# ---------------------------------------------------------------------------
# Optimization


def adamw_param_groups(model: MaskedPredictor, weight_decay: float) -> list[dict]:
    """Decoupled decay on projections; none on the relative-position bias
    table, the mask token, or normalization parameters."""
    no_decay_ids = {id(model.mask_token), id(model.rel_pos_bias)}
    for module in model.modules():
        if isinstance(module, torch.nn.LayerNorm):
            no_decay_ids.update(id(p) for p in module.parameters())
    decay, no_decay = [], []
    for param in model.parameters():
        (no_decay if id(param) in no_decay_ids else decay).append(param)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def batch_loss(model: MaskedPredictor, batch: WindowBatch,
               windows_per_image: int, pgca: bool) -> torch.Tensor:
    """Mean loss: per window, then per image, then over the batch."""
    tokens = model.embed_window(batch.patches, batch.masked)
    pred = model.encode_predict(tokens)
    losses = window_losses(pred, batch.targets, batch.masked.to(pred.dtype),
                           pgca=pgca)
    return losses.view(-1, windows_per_image).mean(dim=1).mean()


def collapse_diagnostic(model: MaskedPredictor, probe: WindowBatch) -> float:
    """Mean over target dims of the prediction variance across masked tokens.

    Pooled over every masked token of the probe batch, so the score is
    invariant to batch order. Scores below 1e-4 flag probable collapse.
    In PGCA plans (nothing masked) all tokens are used.
    """
    with torch.no_grad():
        tokens = model.embed_window(probe.patches, probe.masked)
        pred = model.encode_predict(tokens)
    selected = pred[probe.masked] if bool(probe.masked.any()) else pred.reshape(-1, pred.shape[-1])
    return float(selected.var(dim=0, unbiased=False).mean())


def _probe_batch(images: list[np.ndarray], cfg: PretrainConfig,
                 grid: PatchGrid) -> WindowBatch:
    """Fixed diagnostic batch, independent of epoch."""
    count = min(cfg.batch_size, len(images))
    parts = [prepare_sample(images[i], cfg, grid,
                            derive_seed(cfg.seed, "diag", i))[0]
             for i in range(count)]
    return WindowBatch(
        patches=torch.cat([p.patches for p in parts]),
        targets=torch.cat([p.targets for p in parts]),
        masked=torch.cat([p.masked for p in parts]),
    )


def pretrain(images: list[np.ndarray], cfg: PretrainConfig,
             model_cfg: ModelConfig | None = None,
             out_dir: str | Path | None = None,
             ) -> tuple[MaskedPredictor, RunLog]:
    """Run masked pretraining over ``images``.

    Per sample: augment, compute the target feature on the augmented
    image, tokenize targets, sample windows and masks, embed/predict per
    window, masked-MSE loss; AdamW updates per batch. Returns the trained
    model and the per-epoch log. With ``out_dir`` set, also writes
    ``runlog.csv``, periodic checkpoints, and a final checkpoint.

    Raises DivergenceError (after recording the epoch so far) if the loss
    goes non-finite.
    """
    cfg.validate()
    if not images:
        raise ValidationError("pretraining corpus is empty")
    h, w = images[0].shape
    patch_side = model_cfg.patch_side if model_cfg is not None else 8
    grid = PatchGrid.for_image(h, w, patch_side)
    if model_cfg is None:
        model_cfg = ModelConfig(
            patch_side=patch_side,
            target_dim=target_dim(cfg.target_kind, patch_side, cfg.bank()),
            window_side=max(grid.rows, grid.cols))
    expected_dim = target_dim(cfg.target_kind, model_cfg.patch_side, cfg.bank())
    if model_cfg.target_dim != expected_dim:
        raise ValidationError(
            f"model target_dim {model_cfg.target_dim} does not match feature "
            f"kind {cfg.target_kind!r} (expected {expected_dim})")
    if cfg.mask_mode == "local" and cfg.window_side > model_cfg.window_side:
        raise ValidationError(
            f"window_side {cfg.window_side} exceeds model bias coverage "
            f"{model_cfg.window_side}")

    model = build_model(model_cfg, seed=derive_seed(cfg.seed, "init"))
    optimizer = torch.optim.AdamW(adamw_param_groups(model, cfg.weight_decay),
                                  lr=cfg.peak_lr, betas=cfg.betas)
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs
    pgca = cfg.mask_ratio == 0.0
    windows_per_image = 1 if cfg.mask_mode == "global" else cfg.windows_per_image
    probe = _probe_batch(images, cfg, grid)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = RunLog()
    step = 0
    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        order = np.random.default_rng(
            derive_seed(cfg.seed, "order", epoch)).permutation(n)
        epoch_losses = []
        lr = cfg.peak_lr
        for start in range(0, n, cfg.batch_size):
            batch = _prepare_minibatch(images, order[start:start + cfg.batch_size],
                                       epoch, cfg, grid)
            lr = lr_at(step, total_steps, warmup_steps, cfg.peak_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = batch_loss(model, batch, windows_per_image, pgca)
            loss_value = loss.detach().item()
            if not math.isfinite(loss_value):
                if out_dir is not None:
                    log.records.append(EpochRecord(epoch + 1, loss_value, lr,
                                                   time.perf_counter() - tic,
                                                   float("nan")))
                    log.to_csv(out_dir / "runlog.csv")
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch + 1}, step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss_value)
            step += 1
        record = EpochRecord(
            epoch=epoch + 1,
            loss=float(np.mean(epoch_losses)),
            lr=lr,
            seconds=time.perf_counter() - tic,
            pred_variance=collapse_diagnostic(model, probe),
        )
        log.records.append(record)
        if (out_dir is not None and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0):
            save_checkpoint(model, out_dir / f"ckpt_{epoch + 1:04d}",
                            global_step=step)
    if out_dir is not None:
        save_checkpoint(model, out_dir / "final", global_step=step)
        log.to_csv(out_dir / "runlog.csv")
    return model, log
