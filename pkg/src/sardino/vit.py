"""Vision transformer encoder.

Images are split into non-overlapping patches, linearly projected, and
run through pre-norm transformer blocks with a learned class token and
learned positional embeddings. The encoder keeps a second positional
table for half-resolution inputs so the same weights can embed the
small local crops used during self-supervised pre-training.

The forward pass returns the class embedding, the patch-token grid, and
the final block's class-token attention over patch positions (one map
per head), which downstream segmentation decoders consume as rasters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 448
    patch_size: int = 16
    in_channels: int = 12
    embed_dim: int = 192
    depth: int = 12
    num_heads: int = 3
    mlp_ratio: float = 4.0
    with_half_entry: bool = True

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def validate(self) -> "ViTConfig":
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.with_half_entry:
            half = self.image_size // 2
            if half % self.patch_size != 0 or half < self.patch_size:
                raise ConfigError(f"half-resolution input {half} incompatible "
                                  f"with patch_size {self.patch_size}")
        for field in ("image_size", "patch_size", "in_channels", "embed_dim",
                      "depth", "num_heads"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")
        return self

    @classmethod
    def tiny(cls, **overrides) -> "ViTConfig":
        return replace(cls(embed_dim=192, depth=12, num_heads=3), **overrides).validate()

    @classmethod
    def base(cls, **overrides) -> "ViTConfig":
        return replace(cls(embed_dim=768, depth=12, num_heads=12), **overrides).validate()

    @classmethod
    def desk(cls, **overrides) -> "ViTConfig":
        """Small enough to train on a laptop CPU in minutes."""
        return replace(cls(image_size=32, patch_size=8, embed_dim=64,
                           depth=4, num_heads=4), **overrides).validate()


PRESETS = {"tiny": ViTConfig.tiny, "base": ViTConfig.base, "desk": ViTConfig.desk}


@dataclass
class ViTOutput:
    cls: Tensor              # [N, D]
    patch_tokens: Tensor     # [N, G, G, D]
    attention_maps: Tensor   # [N, heads, G, G], final-block cls attention over patches
    last_attention: Tensor   # [N, heads, 1+G*G, 1+G*G], full final-block softmax
    grid: int


class PatchEmbed(nn.Module):
    """Flatten non-overlapping p x p patches and project them linearly."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.in_channels = cfg.in_channels
        self.proj = nn.Linear(cfg.in_channels * cfg.patch_size ** 2, cfg.embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.patch_size
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        if h % p or w % p:
            raise ShapeError(f"input {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = ag.reshape(x, (n, c, gh, p, gw, p))
        patches = ag.transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = ag.reshape(patches, (n, gh * gw, c * p * p))
        return self.proj(patches)


class Attention(nn.Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.scale = cfg.head_dim ** -0.5
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim, rng)
        self.proj = nn.Linear(cfg.embed_dim, cfg.embed_dim, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, t, d = x.shape
        h, dh = self.num_heads, self.head_dim
        qkv = self.qkv(x)
        qkv = ag.transpose(ag.reshape(qkv, (n, t, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * self.scale
        attn = ag.softmax(logits, axis=-1)           # [N, h, T, T]
        out = ag.matmul(attn, v)                     # [N, h, T, dh]
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (n, t, d))
        return self.proj(out), attn


class MLP(nn.Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        super().__init__()
        hidden = int(cfg.embed_dim * cfg.mlp_ratio)
        self.fc1 = nn.Linear(cfg.embed_dim, hidden, rng)
        self.fc2 = nn.Linear(hidden, cfg.embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg, rng)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.mlp = MLP(cfg, rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    def __init__(self, cfg: ViTConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        cfg.validate()
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.cls_token = nn.Parameter(nn.scaled_normal(rng, (1, 1, cfg.embed_dim)))
        g = cfg.grid
        self.pos_embed = nn.Parameter(
            nn.scaled_normal(rng, (1, 1 + g * g, cfg.embed_dim)))
        if cfg.with_half_entry:
            gh = g // 2
            self.pos_embed_half = nn.Parameter(
                nn.scaled_normal(rng, (1, 1 + gh * gh, cfg.embed_dim)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def _positional(self, g: int) -> Tensor:
        if g == self.cfg.grid:
            return self.pos_embed
        if self.cfg.with_half_entry and g == self.cfg.grid // 2:
            return self.pos_embed_half
        raise ShapeError(f"no positional table for a {g}x{g} patch grid "
                         f"(full grid is {self.cfg.grid})")

    def forward(self, x: Tensor) -> ViTOutput:
        n, c, h, w = x.shape
        if h != w:
            raise ShapeError(f"encoder expects square inputs, got {h}x{w}")
        tokens = self.patch_embed(x)                 # [N, G*G, D]
        g = h // self.cfg.patch_size
        ones = Tensor(np.ones((n, 1, 1), dtype=x.dtype), dtype=x.dtype)
        cls = self.cls_token * ones                  # broadcast to [N, 1, D]
        seq = ag.concat([cls, tokens], axis=1) + self._positional(g)
        attn = None
        for block in self.blocks:
            seq, attn = block(seq)
        seq = self.norm(seq)
        cls_out = seq[:, 0]
        patch = ag.reshape(seq[:, 1:], (n, g, g, self.cfg.embed_dim))
        maps = ag.reshape(attn[:, :, 0, 1:], (n, self.cfg.num_heads, g, g))
        return ViTOutput(cls=cls_out, patch_tokens=patch, attention_maps=maps,
                         last_attention=attn, grid=g)


def normalize_attention_maps(maps: Tensor, eps: float = 1e-8) -> Tensor:
    """Min-max normalize each head's map to [0, 1] (differentiable), so the
    rasters handed to a decoder share a fixed range."""
    lo = ag.reduce_min(maps, axis=(-2, -1), keepdims=True)
    hi = ag.reduce_max(maps, axis=(-2, -1), keepdims=True)
    return (maps - lo) / (hi - lo + eps)


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return model.num_parameters(trainable_only=trainable_only)
