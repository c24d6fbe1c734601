"""Segmentation decoders and fine-tuning assembly.

Four ways to turn a tile into per-pixel class logits:

  unet_baseline        U-Net over the raw channel stack
  attn_unet            U-Net over the encoder's attention maps alone
  unet_plus_attention  U-Net over raw channels + attention maps
  token_decoder        convolutional upsampling head over patch tokens

Attention maps are min-max normalized per head and bilinearly upsampled
back to pixel resolution before entering a U-Net, so they act as extra
image channels. The token decoder upsamples 16x, which matches the
input resolution exactly when the encoder uses 16-pixel patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import ConfigError, DataError, ShapeError
from .geodata import NUM_CLASSES
from .metrics import ConfusionMatrix, miou
from .vit import VisionTransformer, normalize_attention_maps

MODES = ("unet_baseline", "attn_unet", "unet_plus_attention", "token_decoder")


@dataclass(frozen=True)
class FineTuneConfig:
    mode: str = "unet_plus_attention"
    freeze_backbone: bool = True
    num_classes: int = NUM_CLASSES
    unet_widths: tuple[int, int, int] = (64, 128, 256)
    loss: str = "ce"              # "ce" or "per_class_sigmoid"
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0

    def validate(self) -> "FineTuneConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.loss not in ("ce", "per_class_sigmoid"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if len(self.unet_widths) != 3 or any(w < 1 for w in self.unet_widths):
            raise ConfigError("unet_widths must be three positive integers")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        return self


class DoubleConv(nn.Module):
    """conv3x3-BN-ReLU twice; convolutions carry no bias since BN re-centers."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, rng, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, rng, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        x = ag.relu(self.bn1(self.conv1(x)))
        return ag.relu(self.bn2(self.conv2(x)))


class UNet(nn.Module):
    """Three max-pool stages down to a bottleneck, three bilinear upsampling
    stages back with skip concatenation, and a 1x1 projection to logits.
    Input sides must be divisible by 8 so every skip lines up."""

    def __init__(self, in_channels: int, num_classes: int,
                 rng: np.random.Generator,
                 widths: Sequence[int] = (64, 128, 256)):
        super().__init__()
        w1, w2, w3 = widths
        wb = 2 * w3
        self.inc = DoubleConv(in_channels, w1, rng)
        self.down1 = DoubleConv(w1, w2, rng)
        self.down2 = DoubleConv(w2, w3, rng)
        self.down3 = DoubleConv(w3, wb, rng)
        self.up1 = DoubleConv(wb + w3, w3, rng)
        self.up2 = DoubleConv(w3 + w2, w2, rng)
        self.up3 = DoubleConv(w2 + w1, w1, rng)
        self.outc = nn.Conv2d(w1, num_classes, 1, rng)
        self.in_channels = in_channels

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ShapeError(f"U-Net expects {self.in_channels} channels, got {c}")
        if h % 8 or w % 8:
            raise ShapeError(f"U-Net input sides must be divisible by 8, "
                             f"got {h}x{w}")
        s1 = self.inc(x)
        s2 = self.down1(ag.max_pool2d(s1))
        s3 = self.down2(ag.max_pool2d(s2))
        b = self.down3(ag.max_pool2d(s3))
        u = self.up1(ag.concat([ag.bilinear_upsample2x(b), s3], axis=1))
        u = self.up2(ag.concat([ag.bilinear_upsample2x(u), s2], axis=1))
        u = self.up3(ag.concat([ag.bilinear_upsample2x(u), s1], axis=1))
        return self.outc(u)


class TokenDecoder(nn.Module):
    """Patch-token grid to pixel logits: four conv-BN-ReLU-upsample stages,
    each halving the channel width, then a 1x1 projection. Total upsampling
    is 16x, so output resolution equals input resolution exactly when the
    encoder patch size is 16."""

    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        if embed_dim < 16:
            raise ConfigError(f"embed_dim {embed_dim} too small to halve four times")
        widths = [embed_dim >> k for k in range(1, 5)]
        chans = [embed_dim] + widths
        self.stages = [
            nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, rng, padding=1,
                                    bias=False),
                          nn.BatchNorm2d(chans[i + 1]), nn.ReLU())
            for i in range(4)
        ]
        self.outc = nn.Conv2d(widths[-1], num_classes, 1, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        x = tokens  # [N, D, G, G]
        for stage in self.stages:
            x = ag.bilinear_upsample2x(stage(x))
        return self.outc(x)


class SegModel(nn.Module):
    """Backbone (optional) plus decoder. `features` is the differentiable
    path from raw channels to the decoder input, so a frozen-backbone run
    can precompute it once per tile and train on the cached arrays."""

    def __init__(self, mode: str, decoder: nn.Module,
                 backbone: Optional[VisionTransformer]):
        super().__init__()
        self.mode = mode
        self.decoder = decoder
        self.backbone = backbone

    def _attention_channels(self, x: Tensor) -> Tensor:
        out = self.backbone(x)
        maps = normalize_attention_maps(out.attention_maps)
        doublings = int(math.log2(self.backbone.cfg.patch_size))
        for _ in range(doublings):
            maps = ag.bilinear_upsample2x(maps)
        return maps

    def features(self, x: Tensor) -> Tensor:
        if self.mode == "unet_baseline":
            return x
        if self.mode == "attn_unet":
            return self._attention_channels(x)
        if self.mode == "unet_plus_attention":
            return ag.concat([x, self._attention_channels(x)], axis=1)
        # token_decoder: [N, G, G, D] -> [N, D, G, G]
        tokens = self.backbone(x).patch_tokens
        return ag.transpose(tokens, (0, 3, 1, 2))

    def forward(self, x: Tensor) -> Tensor:
        logits = self.decoder(self.features(x))
        if logits.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"decoder produced {logits.shape[-2:]} logits for "
                             f"{x.shape[-2:]} input; token_decoder needs a "
                             f"16-pixel patch encoder")
        return logits

    def precompute_features(self, x: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.features(Tensor(np.asarray(x, dtype=np.float32))).data

    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def assemble_model(cfg: FineTuneConfig, backbone: Optional[VisionTransformer],
                   rng: np.random.Generator,
                   in_channels: int = 12) -> SegModel:
    cfg.validate()
    if cfg.mode != "unet_baseline":
        if backbone is None:
            raise ConfigError(f"mode {cfg.mode!r} needs an encoder backbone")
        if backbone.cfg.patch_size & (backbone.cfg.patch_size - 1):
            raise ConfigError("attention upsampling needs a power-of-two patch size")
        if backbone.cfg.in_channels != in_channels:
            raise ConfigError(f"backbone expects {backbone.cfg.in_channels} "
                              f"channels, data has {in_channels}")
    if cfg.mode == "token_decoder" and backbone.cfg.patch_size != 16:
        raise ConfigError("token_decoder output matches the input resolution "
                          "only with patch_size 16, got "
                          f"{backbone.cfg.patch_size}")

    heads = backbone.cfg.num_heads if backbone is not None else 0
    if cfg.mode == "unet_baseline":
        decoder = UNet(in_channels, cfg.num_classes, rng, cfg.unet_widths)
    elif cfg.mode == "attn_unet":
        decoder = UNet(heads, cfg.num_classes, rng, cfg.unet_widths)
    elif cfg.mode == "unet_plus_attention":
        decoder = UNet(in_channels + heads, cfg.num_classes, rng, cfg.unet_widths)
    else:
        decoder = TokenDecoder(backbone.cfg.embed_dim, cfg.num_classes, rng)

    model = SegModel(cfg.mode, decoder, backbone if cfg.mode != "unet_baseline" else None)
    if model.backbone is not None and cfg.freeze_backbone:
        model.backbone.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# training and prediction

def segmentation_loss(logits: Tensor, labels: np.ndarray, kind: str) -> Tensor:
    if kind == "ce":
        return ag.cross_entropy(logits, labels)
    n, k, h, w = logits.shape
    onehot = np.zeros((n, k, h, w), dtype=logits.dtype)
    np.put_along_axis(onehot, labels[:, None, :, :].astype(np.intp), 1.0, axis=1)
    return ag.sigmoid_bce_with_logits(logits, onehot)


@dataclass
class EpochStats:
    loss: float
    train_miou: float


def finetune_epoch(model: nn.Module, channels: Sequence[np.ndarray],
                   labels: Sequence[np.ndarray], optimizer,
                   batch_size: int, rng: np.random.Generator,
                   loss_kind: str = "ce",
                   num_classes: int = NUM_CLASSES) -> EpochStats:
    """One pass over the tiles; returns the mean training loss and the
    training MIOU accumulated from each batch's predictions as the model
    evolves. Works on any module whose forward maps stacked inputs to
    per-pixel logits, so a cached-feature decoder trains the same way as
    the full model."""
    if any(lab is None for lab in labels):
        raise DataError("fine-tuning requires a label plane on every tile")
    model.train()
    n = len(channels)
    order = rng.permutation(n)
    total = 0.0
    batches = 0
    cm = ConfusionMatrix(num_classes)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = Tensor(np.stack([channels[i] for i in idx]).astype(np.float32))
        y = np.stack([labels[i] for i in idx])
        with ag.Tape() as tape:
            logits = model(x)
            loss = segmentation_loss(logits, y, loss_kind)
        total += loss.item()
        batches += 1
        cm.update(y, logits.data.argmax(axis=1).astype(np.uint8))
        ag.backward(loss, tape)
        optimizer.step()
    return EpochStats(loss=total / max(batches, 1), train_miou=miou(cm))


def predict_landcover(model: SegModel, channels: np.ndarray) -> np.ndarray:
    """Argmax class map for one [C, H, W] tile (or a [N, C, H, W] batch)."""
    single = channels.ndim == 3
    x = channels[None] if single else channels
    was_training = model.training
    model.eval()
    try:
        with ag.no_grad():
            logits = model(Tensor(np.asarray(x, dtype=np.float32))).data
    finally:
        model.train(was_training)
    pred = logits.argmax(axis=1).astype(np.uint8)
    return pred[0] if single else pred
