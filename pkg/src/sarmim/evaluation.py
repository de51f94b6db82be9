"""Few-shot evaluation (linear probing and fine-tuning) and attention analysis.

Linear probing trains a feature-standardization layer (running statistics,
no affine parameters) plus a zero-initialized linear classifier on frozen
mean-pooled encoder features; fine-tuning unfreezes the encoder. Accuracy
uses argmax with ties broken toward the lowest class index, so an untrained
zero-weight classifier scores exactly 1/C on balanced test sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DivergenceError, ValidationError
from .model import MaskedPredictor
from .util import derive_seed


@dataclass(frozen=True)
class FewShotSplit:
    shots: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "linear"
    lr: float = 1e-3
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 50
    epochs: int = 40
    warmup_epochs: int = 2
    warmup_lr: float = 1e-5

    def validate(self) -> None:
        if self.mode not in ("linear", "finetune"):
            raise ValidationError(f"mode must be linear or finetune, got {self.mode}")
        if self.epochs and not self.warmup_epochs < self.epochs:
            raise ValidationError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


def make_few_shot_split(labels: np.ndarray, shots: int, seed: int) -> FewShotSplit:
    """Uniformly sample ``shots`` training items per class, rest is test."""
    labels = np.asarray(labels)
    if shots < 1:
        raise ValidationError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) <= shots:
            raise ValidationError(
                f"class {cls} has only {len(idx)} items; needs more than {shots}")
        perm = rng.permutation(len(idx))
        train.append(idx[perm[:shots]])
        test.append(idx[perm[shots:]])
    return FewShotSplit(shots=shots,
                        train_indices=np.sort(np.concatenate(train)),
                        test_indices=np.sort(np.concatenate(test)),
                        seed=seed)


def _to_patch_tensor(images: list[np.ndarray] | np.ndarray, p: int) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32)
    n, h, w = arr.shape
    blocks = arr.reshape(n, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4)
    return torch.from_numpy(np.ascontiguousarray(blocks.reshape(n, -1, p * p)))


def encode_image_features(model: MaskedPredictor,
                          images: list[np.ndarray] | np.ndarray,
                          batch_size: int = 128) -> np.ndarray:
    """Mean-pooled encoder features with all patches visible: (N, d).

    The whole patch grid is treated as one window, which requires the
    model's relative-position table to cover the grid side.
    """
    p = model.config.patch_side
    patches = _to_patch_tensor(images, p).to(next(model.parameters()).dtype)
    feats = []
    model.eval()
    with torch.no_grad():
        for start in range(0, patches.shape[0], batch_size):
            feats.append(model.encoder_features(patches[start:start + batch_size]))
    return torch.cat(feats).numpy()


def _probe_lr(epoch: int, cfg: ProbeConfig) -> float:
    """Constant warmup at ``warmup_lr`` then cosine decay from ``lr``."""
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_lr
    span = cfg.epochs - cfg.warmup_epochs
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


class _ProbeHead(torch.nn.Module):
    """Feature standardization (running stats, affine disabled) + linear."""

    def __init__(self, dim: int, classes: int):
        super().__init__()
        self.norm = torch.nn.BatchNorm1d(dim, affine=False)
        self.fc = torch.nn.Linear(dim, classes)
        self.fc.weight.data.zero_()
        self.fc.bias.data.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.norm(x))


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax breaks ties toward the lowest class index
    return float((np.argmax(logits, axis=1) == labels).mean())


def probe(model: MaskedPredictor | None, split: FewShotSplit, cfg: ProbeConfig,
          images: list[np.ndarray] | None, labels: np.ndarray,
          features: np.ndarray | None = None) -> float:
    """Train a probe on the split's shots; return top-1 test accuracy.

    In linear mode, precomputed (N, d) ``features`` may stand in for the
    encoder (``model`` and ``images`` may then be None); otherwise features
    come from ``encode_image_features`` on the frozen encoder.
    """
    cfg.validate()
    labels = np.asarray(labels)
    classes = int(labels.max()) + 1
    if features is not None and cfg.mode != "linear":
        raise ValidationError("precomputed features require linear mode")
    d = features.shape[1] if features is not None else model.config.embed_dim
    head = _ProbeHead(d, classes)
    gen = torch.Generator().manual_seed(derive_seed(split.seed, "probe") & 0x7FFFFFFFFFFFFFFF)

    train_labels = torch.from_numpy(labels[split.train_indices])
    if cfg.mode == "linear":
        if features is not None:
            feats = features[split.train_indices].astype(np.float32)
        else:
            feats = encode_image_features(model, [images[i] for i in split.train_indices])
        train_inputs = torch.from_numpy(feats)
        trainable = list(head.parameters())
    else:
        p = model.config.patch_side
        train_inputs = _to_patch_tensor([images[i] for i in split.train_indices], p)
        trainable = list(model.parameters()) + list(head.parameters())
        model.train()

    optimizer = torch.optim.AdamW(trainable, lr=cfg.lr, betas=cfg.betas,
                                  weight_decay=cfg.weight_decay)
    n = len(split.train_indices)
    head.train()
    for epoch in range(cfg.epochs):
        lr = _probe_lr(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            if cfg.mode == "linear":
                logits = head(train_inputs[sel])
            else:
                logits = head(model.encoder_features(train_inputs[sel]))
            loss = torch.nn.functional.cross_entropy(logits, train_labels[sel])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite probe loss at epoch {epoch + 1}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

    head.eval()
    with torch.no_grad():
        if features is not None:
            test_feats = torch.from_numpy(
                features[split.test_indices].astype(np.float32))
        else:
            test_images = [images[i] for i in split.test_indices]
            test_feats = torch.from_numpy(encode_image_features(model, test_images))
        logits = head(test_feats).numpy()
    return _accuracy(logits, labels[split.test_indices])


def evaluate_few_shot(model: MaskedPredictor, images: list[np.ndarray],
                      labels: np.ndarray, shots: list[int], repeats: int = 10,
                      cfg: ProbeConfig | None = None, base_seed: int = 0,
                      ) -> tuple[list[dict], dict[int, tuple[float, float]]]:
    """Probe over ``repeats`` seeded splits per shot count.

    Returns (rows, summary): one row dict per run with keys
    (shots, repeat, seed, mode, accuracy), and per-shot (mean, std).
    """
    cfg = cfg or ProbeConfig()
    rows = []
    summary: dict[int, tuple[float, float]] = {}
    for n_shots in shots:
        accs = []
        for rep in range(repeats):
            seed = derive_seed(base_seed, "split", n_shots, rep)
            split = make_few_shot_split(labels, n_shots, seed)
            acc = probe(model, split, cfg, images, labels)
            rows.append({"shots": n_shots, "repeat": rep, "seed": seed,
                         "mode": cfg.mode, "accuracy": acc})
            accs.append(acc)
        summary[n_shots] = (float(np.mean(accs)), float(np.std(accs)))
    return rows, summary


# ---------------------------------------------------------------------------
# Attention distance


def patch_center_distances(grid_side: int, patch_side: int) -> np.ndarray:
    """(T, T) Euclidean distances between patch centers, in pixels."""
    pos = np.arange(grid_side)
    rr, cc = np.meshgrid(pos, pos, indexing="ij")
    centers = np.stack([(rr.ravel() + 0.5) * patch_side,
                        (cc.ravel() + 0.5) * patch_side], axis=1)
    diff = centers[:, None, :] - centers[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def attention_distance_from_maps(attn: np.ndarray, grid_side: int,
                                 patch_side: int) -> np.ndarray:
    """Per-head mean attention distance from raw maps.

    ``attn`` is (..., heads, T, T) post-softmax; the result averages
    sum_j a[q, j] * dist(q, j) over queries and any leading axes,
    returning (heads,).
    """
    dist = patch_center_distances(grid_side, patch_side)
    weighted = (attn * dist).sum(axis=-1)  # (..., heads, T)
    per_head = weighted.mean(axis=-1)      # (..., heads)
    return per_head.reshape(-1, per_head.shape[-1]).mean(axis=0)


def attention_distance(model: MaskedPredictor,
                       images: list[np.ndarray]) -> np.ndarray:
    """(encoder layers, heads) mean attention distances over ``images``."""
    if not images:
        raise ValidationError("attention distance needs at least one image")
    p = model.config.patch_side
    patches = _to_patch_tensor(images, p)
    grid_side = math.isqrt(patches.shape[1])
    model.eval()
    with torch.no_grad():
        maps = model.encoder_attention(patches)
    return np.stack([
        attention_distance_from_maps(m.numpy(), grid_side, p) for m in maps
    ])
