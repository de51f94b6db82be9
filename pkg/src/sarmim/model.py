"""Compact transformer encoder-predictor with mask tokens and relative
position bias, the feature-space MSE objective, and checkpoint I/O.

Each sampled window is processed as an independent token sequence: visible
patches are linearly embedded, masked positions carry a learned mask token,
and a single per-head relative-position bias table (shared by all blocks)
is added to the attention logits. The encoder stack feeds a deeper
predictor stack whose output is projected to the per-patch target
dimension. There are no absolute positional embeddings; all spatial
information enters through the relative bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import DivergenceError, ValidationError
from .util import atomic_write_bytes, read_json, write_json

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_TENSORS = "tensors.bin"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor.

    ``window_side`` is the largest token-window side the model accepts;
    it sizes the relative-position bias table (offsets in
    ``(-window_side+1 .. window_side-1)^2``) and must cover both the
    training windows and the full grid used for feature extraction.
    ``paper_faithful`` switches the predictor to its eight-layer variant.
    """

    patch_side: int = 8
    embed_dim: int = 128
    encoder_depth: int = 4
    predictor_depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    target_dim: int = 256
    window_side: int = 8
    paper_faithful: bool = False

    def __post_init__(self):
        if self.paper_faithful and self.predictor_depth != 8:
            object.__setattr__(self, "predictor_depth", 8)

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ValidationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for name in ("patch_side", "embed_dim", "encoder_depth", "predictor_depth",
                     "heads", "target_dim", "window_side"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")


def _trunc_normal_(tensor: torch.Tensor, std: float,
                   generator: torch.Generator | None) -> None:
    """Truncated normal init (cut at 2 std) driven by an explicit generator."""
    a, b = -2.0 * std, 2.0 * std
    lo = (1.0 + math.erf((a / std) / math.sqrt(2.0))) / 2.0
    hi = (1.0 + math.erf((b / std) / math.sqrt(2.0))) / 2.0
    tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=generator)
    tensor.erfinv_()
    tensor.mul_(std * math.sqrt(2.0))
    tensor.clamp_(min=a, max=b)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor,
                need_attn: bool = False):
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        logits = (q @ k.transpose(-2, -1)) * self.scale + bias
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return self.proj(out), (attn if need_attn else None)


class Block(nn.Module):
    """Pre-norm transformer block with relative-position-biased attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(),
                                 nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, bias: torch.Tensor,
                need_attn: bool = False):
        h, attn = self.attn(self.norm1(x), bias, need_attn)
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class MaskedPredictor(nn.Module):
    def __init__(self, config: ModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_side ** 2, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        table = (2 * config.window_side - 1) ** 2
        self.rel_pos_bias = nn.Parameter(torch.zeros(config.heads, table))
        depth = config.encoder_depth + config.predictor_depth
        self.blocks = nn.ModuleList(
            Block(d, config.heads, config.mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.target_dim)
        self._rel_index: dict[int, torch.Tensor] = {}
        if dtype != torch.float32:
            self.to(dtype)

    def init_weights(self, seed: int) -> None:
        """Deterministic init: truncated normal projections and mask token,
        zeroed biases and bias table."""
        gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _trunc_normal_(module.weight.data, 0.02, gen)
                module.bias.data.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()
        _trunc_normal_(self.mask_token.data, 0.02, gen)
        self.rel_pos_bias.data.zero_()

    # -- relative position handling -----------------------------------

    def _window_side_for(self, tokens: int) -> int:
        w = math.isqrt(tokens)
        if w * w != tokens:
            raise ValidationError(f"token count {tokens} is not a square window")
        if w > self.config.window_side:
            raise ValidationError(
                f"window side {w} exceeds bias table coverage "
                f"{self.config.window_side}")
        return w

    def rel_index(self, w: int) -> torch.Tensor:
        """(w², w²) table index for each query/key offset pair."""
        if w not in self._rel_index:
            span = 2 * self.config.window_side - 1
            pos = torch.arange(w)
            coords = torch.stack(torch.meshgrid(pos, pos, indexing="ij"),
                                 dim=-1).reshape(-1, 2)
            delta = coords[:, None, :] - coords[None, :, :]
            delta = delta + self.config.window_side - 1
            self._rel_index[w] = (delta[..., 0] * span + delta[..., 1]).long()
        return self._rel_index[w]

    def _bias(self, w: int) -> torch.Tensor:
        idx = self.rel_index(w)
        return self.rel_pos_bias[:, idx]  # (heads, w², w²)

    # -- forward paths -------------------------------------------------

    def embed_window(self, patches: torch.Tensor,
                     masked: torch.Tensor) -> torch.Tensor:
        """Embed visible patches; substitute the mask token at masked slots.

        ``patches`` is (B, T, patch_side²) pixel blocks in window-relative
        row-major order; ``masked`` is a (B, T) boolean mask. All T tokens
        are kept (no token dropping).
        """
        if patches.shape[-1] != self.config.patch_side ** 2:
            raise ValidationError(
                f"patch dim {patches.shape[-1]} != patch_side² "
                f"{self.config.patch_side ** 2}")
        if masked.shape != patches.shape[:2]:
            raise ValidationError(
                f"mask shape {tuple(masked.shape)} does not match "
                f"patches {tuple(patches.shape[:2])}")
        self._window_side_for(patches.shape[1])
        tokens = self.patch_embed(patches)
        return torch.where(masked[..., None], self.mask_token, tokens)

    def encode_predict(self, tokens: torch.Tensor) -> torch.Tensor:
        """Full encoder+predictor stack -> per-token target predictions."""
        w = self._window_side_for(tokens.shape[1])
        bias = self._bias(w)
        x = tokens
        for block in self.blocks:
            x, _ = block(x, bias)
        pred = self.head(self.norm(x))
        if not torch.isfinite(pred).all():
            raise DivergenceError("numerical divergence: non-finite activations")
        return pred

    def encoder_features(self, patches: torch.Tensor) -> torch.Tensor:
        """Mean-pooled encoder output for fully visible token windows."""
        masked = torch.zeros(patches.shape[:2], dtype=torch.bool,
                             device=patches.device)
        x = self.embed_window(patches, masked)
        w = self._window_side_for(x.shape[1])
        bias = self._bias(w)
        for block in self.blocks[:self.config.encoder_depth]:
            x, _ = block(x, bias)
        return x.mean(dim=1)

    def encoder_attention(self, patches: torch.Tensor) -> list[torch.Tensor]:
        """Post-softmax attention maps of each encoder block, fully visible."""
        masked = torch.zeros(patches.shape[:2], dtype=torch.bool,
                             device=patches.device)
        x = self.embed_window(patches, masked)
        w = self._window_side_for(x.shape[1])
        bias = self._bias(w)
        maps = []
        for block in self.blocks[:self.config.encoder_depth]:
            x, attn = block(x, bias, need_attn=True)
            maps.append(attn)
        return maps


def build_model(config: ModelConfig, seed: int,
                dtype: torch.dtype = torch.float32) -> MaskedPredictor:
    model = MaskedPredictor(config, dtype=dtype)
    model.init_weights(seed)
    return model


# ---------------------------------------------------------------------------
# Loss


def mim_loss(pred: torch.Tensor, targets: torch.Tensor,
             masked: list[int] | np.ndarray, pgca: bool = False) -> torch.Tensor:
    """Masked-prediction loss for one window.

    Mean over masked positions of the mean squared difference over the
    target dimension. With an empty mask, ``pgca=True`` averages over all
    positions instead; otherwise an empty mask is an error.
    """
    if pred.shape != targets.shape:
        raise ValidationError(
            f"pred {tuple(pred.shape)} and targets {tuple(targets.shape)} differ")
    per_token = ((pred - targets) ** 2).mean(dim=-1)
    masked = list(masked)
    if not masked:
        if not pgca:
            raise ValidationError("empty masked set requires PGCA mode")
        return per_token.mean()
    return per_token[masked].mean()


def window_losses(pred: torch.Tensor, targets: torch.Tensor,
                  masked: torch.Tensor, pgca: bool = False) -> torch.Tensor:
    """Per-window losses for a batch of windows: (B, T, D) -> (B,).

    Equals ``mim_loss`` applied window by window; kept batched because the
    training loop is throughput-bound.
    """
    per_token = ((pred - targets) ** 2).mean(dim=-1)
    if pgca:
        return per_token.mean(dim=-1)
    counts = masked.sum(dim=-1)
    if (counts == 0).any():
        raise ValidationError("empty masked set requires PGCA mode")
    return (per_token * masked).sum(dim=-1) / counts


# ---------------------------------------------------------------------------
# Checkpoint format: manifest.json + tensors.bin (little-endian float32)


def save_checkpoint(model: MaskedPredictor, directory: str | Path,
                    global_step: int = 0, rng_state: bytes | None = None) -> Path:
    """Write manifest.json + tensors.bin; files land atomically.

    Tensors are stored as little-endian float32 in state-dict order, so a
    float32 model round-trips bitwise.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "format_version": 1,
        "config": asdict(model.config),
        "global_step": global_step,
        "rng_state": rng_state.hex() if rng_state is not None else None,
        "tensors": {},
    }
    chunks = []
    offset = 0
    for name, tensor in model.state_dict().items():
        data = tensor.detach().cpu().numpy().astype("<f4")
        manifest["tensors"][name] = {"shape": list(data.shape), "offset": offset}
        chunks.append(data.tobytes())
        offset += len(chunks[-1])
    atomic_write_bytes(directory / CHECKPOINT_TENSORS, b"".join(chunks))
    write_json(directory / CHECKPOINT_MANIFEST, manifest)
    return directory


def load_checkpoint(directory: str | Path) -> tuple[MaskedPredictor, dict]:
    directory = Path(directory)
    manifest = read_json(directory / CHECKPOINT_MANIFEST)
    config = ModelConfig(**manifest["config"])
    model = MaskedPredictor(config)
    raw = (directory / CHECKPOINT_TENSORS).read_bytes()
    state = {}
    for name, meta in manifest["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count,
                            offset=meta["offset"]).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, manifest
