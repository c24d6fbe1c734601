"""Experiment orchestration: end-to-end runs built from the library pieces.

Everything here is deterministic given the run configuration: dataset
synthesis, splits, pre-training, fine-tuning, and the CSV outputs are
all driven by explicit seeds, so re-running a command reproduces its
output files byte for byte.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from . import config as cf
from . import nn
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .decoders import (FineTuneConfig, SegModel, assemble_model,
                       finetune_epoch, predict_landcover)
from .dino import (DinoModel, PretrainResult, collapse_entropy, pretrain,
                   teacher_probs, teacher_temperature)
from .errors import ConfigError, DataError, FormatError
from .geodata import (NUM_CLASSES, RasterTile, compute_normalization,
                      geographic_band_split, normalize_channels,
                      subsample_fraction, synthesize_dataset)
from .metrics import IoUReport, evaluate_model, evaluate_predictions
from .optim import make_optimizer
from .vit import VisionTransformer

RESULTS_HEADER = (["mode", "init", "frozen", "fraction", "seed", "miou",
                   "pixel_accuracy"]
                  + [f"per_class_iou_{k}" for k in range(NUM_CLASSES)])


def format_float(x: float) -> str:
    """repr of the exact double, so CSV reruns are byte-identical."""
    if np.isnan(x):
        return "nan"
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        cells = [format_float(v) if isinstance(v, float) else str(v) for v in row]
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# dataset plumbing

@dataclass
class PreparedData:
    tiles: list[RasterTile]
    split: "object"
    mean: np.ndarray
    std: np.ndarray

    def normalized(self, indices: Sequence[int]) -> list[np.ndarray]:
        return [normalize_channels(self.tiles[i].channels, self.mean, self.std)
                for i in indices]

    def tiles_at(self, indices: Sequence[int]) -> list[RasterTile]:
        return [self.tiles[i] for i in indices]


def prepare_data(values: dict, tiles: Optional[Sequence[RasterTile]] = None
                 ) -> PreparedData:
    if tiles is None:
        tiles = synthesize_dataset(cf.build_synth_config(values))
    tiles = list(tiles)
    split = geographic_band_split(tiles)
    mean, std = compute_normalization([tiles[i] for i in split.train])
    return PreparedData(tiles=tiles, split=split, mean=mean, std=std)


# ---------------------------------------------------------------------------
# pre-training

def pretrain_run(values: dict, data: PreparedData,
                 checkpoint_path=None, history_path=None,
                 progress: Optional[Callable] = None) -> PretrainResult:
    vit_cfg = cf.build_vit_config(values)
    dino_cfg = cf.build_dino_config(values)
    channels = data.normalized(data.split.train)
    result = pretrain(channels, vit_cfg, dino_cfg, progress=progress)
    result.norm_mean, result.norm_std = data.mean, data.std
    if history_path is not None:
        rows = [[h["epoch"], float(h["loss"]), float(h["entropy"]),
                 float(h["teacher_temp"])] for h in result.epoch_history]
        write_csv(history_path, ["epoch", "loss", "entropy", "teacher_temp"],
                  rows)
    if checkpoint_path is not None:
        save_pretrain_checkpoint(checkpoint_path, result, values)
    return result


def save_pretrain_checkpoint(path, result: PretrainResult, values: dict):
    tensors = {f"student.{k}": v for k, v in result.student.state_dict().items()}
    tensors.update({f"teacher.{k}": v for k, v in result.teacher.state_dict().items()})
    tensors["state.center"] = result.state.center
    tensors["state.step"] = np.array([result.state.step], dtype=np.int64)
    tensors["norm.mean"] = result.norm_mean
    tensors["norm.std"] = result.norm_std
    meta = cf.snapshot(values)
    meta["kind"] = "pretrain"
    save_checkpoint(path, tensors, meta)


def load_pretrained_backbone(path) -> tuple[VisionTransformer, np.ndarray,
                                            np.ndarray, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise FormatError(f"checkpoint at {path} is kind {meta.get('kind')!r}, "
                          "expected a pre-training checkpoint")
    values = cf.from_snapshot(meta)
    vit_cfg = cf.build_vit_config(values)
    dino_cfg = cf.build_dino_config(values)
    student = DinoModel(vit_cfg, dino_cfg, np.random.default_rng(0))
    student.load_state_dict({k[len("student."):]: v for k, v in tensors.items()
                             if k.startswith("student.")})
    return student.backbone, tensors["norm.mean"], tensors["norm.std"], values


def clone_backbone(backbone: VisionTransformer) -> VisionTransformer:
    fresh = VisionTransformer(backbone.cfg, np.random.default_rng(0))
    fresh.load_state_dict(backbone.state_dict())
    fresh.requires_grad_(True)
    return fresh


# ---------------------------------------------------------------------------
# collapse experiment

def evaluate_teacher_entropy(teacher: DinoModel, channels: Sequence[np.ndarray],
                             center: np.ndarray, tau_t: float,
                             batch_size: int = 32) -> float:
    """Entropy of the mean teacher distribution over whole tiles, the
    collapse diagnostic. Uses every tile, so the ceiling is ln K rather
    than the log of one batch's row count."""
    logits = []
    for start in range(0, len(channels), batch_size):
        x = Tensor(np.stack(channels[start:start + batch_size]).astype(np.float32))
        with ag.no_grad():
            logits.append(teacher(x).data.copy())
    probs = teacher_probs([np.concatenate(logits, axis=0)], center, tau_t)
    return collapse_entropy(probs)


@dataclass
class CollapseOutcome:
    entropy_with_centering: float
    entropy_without_centering: float
    max_entropy: float
    history_on: list = field(default_factory=list)
    history_off: list = field(default_factory=list)


def collapse_experiment(values: dict, data: PreparedData,
                        progress: Optional[Callable] = None) -> CollapseOutcome:
    """Identical pre-training twice, once with centering and once without,
    then the entropy diagnostic on the finished teachers."""
    vit_cfg = cf.build_vit_config(values)
    base_cfg = cf.build_dino_config(values)
    channels = data.normalized(range(len(data.tiles)))
    entropies = {}
    histories = {}
    for centering in (True, False):
        cfg = replace(base_cfg, centering=centering)
        result = pretrain(channels, vit_cfg, cfg, progress=progress)
        steps_per_epoch = max(1, (len(channels) + cfg.batch_size - 1) // cfg.batch_size)
        tau_final = teacher_temperature(result.state.step / steps_per_epoch, cfg)
        entropies[centering] = evaluate_teacher_entropy(
            result.teacher, channels, result.state.center, tau_final)
        histories[centering] = result.history
    return CollapseOutcome(entropy_with_centering=entropies[True],
                           entropy_without_centering=entropies[False],
                           max_entropy=float(np.log(base_cfg.out_dim)),
                           history_on=histories[True],
                           history_off=histories[False])


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass
class FinetuneOutcome:
    model: SegModel
    best_val_miou: float
    best_epoch: int
    test_report: Optional[IoUReport]
    history: list[dict] = field(default_factory=list)


def _predict_cached(decoder: nn.Module, feats: np.ndarray) -> np.ndarray:
    was_training = decoder.training
    decoder.eval()
    try:
        with ag.no_grad():
            logits = decoder(Tensor(feats[None].astype(np.float32))).data
    finally:
        decoder.train(was_training)
    return logits.argmax(axis=1)[0].astype(np.uint8)


def finetune_run(values: dict, data: PreparedData,
                 backbone: Optional[VisionTransformer],
                 fraction: float = 1.0,
                 evaluate_test: bool = True,
                 progress: Optional[Callable] = None) -> FinetuneOutcome:
    """Train a segmentation model on a labelled fraction of the train split,
    select the epoch with the best validation mean IoU, and score the test
    split with the selected weights.

    With a frozen backbone the decoder input features are computed once per
    tile and cached; gradients never need the encoder, so this is exact."""
    ft_cfg = cf.build_finetune_config(values)
    rng = np.random.default_rng(ft_cfg.seed)
    model = assemble_model(ft_cfg, backbone, rng)

    train_idx = subsample_fraction(list(data.split.train), fraction,
                                   seed=ft_cfg.seed)
    train_channels = data.normalized(train_idx)
    train_labels = [data.tiles[i].labels for i in train_idx]
    if any(lab is None for lab in train_labels):
        raise DataError("fine-tuning requires labelled tiles")
    val_tiles = data.tiles_at(data.split.val)

    optimizer = make_optimizer(ft_cfg.optimizer, model.trainable_parameters(),
                               lr=ft_cfg.lr)
    use_cache = (model.backbone is not None and ft_cfg.freeze_backbone) \
        or model.mode == "unet_baseline"

    if use_cache:
        train_feats = [model.precompute_features(ch[None])[0]
                       for ch in train_channels]
        val_feats = [model.precompute_features(
            normalize_channels(t.channels, data.mean, data.std)[None])[0]
            for t in val_tiles]
        train_module: nn.Module = model.decoder
        train_inputs = train_feats
    else:
        train_module = model
        train_inputs = train_channels

    def val_miou() -> float:
        if use_cache:
            pairs = [(t.labels, _predict_cached(model.decoder, f))
                     for t, f in zip(val_tiles, val_feats)]
            return evaluate_predictions(pairs, ft_cfg.num_classes).miou
        report = evaluate_model(
            lambda ch: predict_landcover(model, ch), val_tiles,
            num_classes=ft_cfg.num_classes,
            transform=lambda ch: normalize_channels(ch, data.mean, data.std))
        return report.miou

    best = (-1.0, 0, None)
    history = []
    epoch_rng = np.random.default_rng([ft_cfg.seed, 77])
    for epoch in range(1, ft_cfg.epochs + 1):
        stats = finetune_epoch(train_module, train_inputs, train_labels,
                               optimizer, ft_cfg.batch_size, epoch_rng,
                               loss_kind=ft_cfg.loss)
        score = val_miou()
        history.append({"epoch": epoch, "train_loss": stats.loss,
                        "train_miou": stats.train_miou, "val_miou": score})
        if progress is not None:
            progress(history[-1])
        if score > best[0]:
            best = (score, epoch, model.state_dict())
    if best[2] is not None:
        model.load_state_dict(best[2])

    test_report = None
    if evaluate_test:
        test_report = evaluate_model(
            lambda ch: predict_landcover(model, ch),
            data.tiles_at(data.split.test),
            num_classes=ft_cfg.num_classes,
            transform=lambda ch: normalize_channels(ch, data.mean, data.std))
    return FinetuneOutcome(model=model, best_val_miou=best[0],
                           best_epoch=best[1], test_report=test_report,
                           history=history)


def save_finetune_checkpoint(path, outcome: FinetuneOutcome, values: dict,
                             mean: np.ndarray, std: np.ndarray,
                             extra: Optional[dict] = None):
    tensors = {f"model.{k}": v for k, v in outcome.model.state_dict().items()}
    tensors["norm.mean"] = mean
    tensors["norm.std"] = std
    meta = cf.snapshot(values)
    meta["kind"] = "finetune"
    meta["best_val_miou"] = format_float(outcome.best_val_miou)
    if extra:
        meta.update({k: str(v) for k, v in extra.items()})
    save_checkpoint(path, tensors, meta)


def load_finetune_model(path) -> tuple[SegModel, np.ndarray, np.ndarray,
                                       dict, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "finetune":
        raise FormatError(f"checkpoint at {path} is kind {meta.get('kind')!r}, "
                          "expected a fine-tuning checkpoint")
    values = cf.from_snapshot(meta)
    ft_cfg = cf.build_finetune_config(values)
    backbone = None
    if ft_cfg.mode != "unet_baseline":
        backbone = VisionTransformer(cf.build_vit_config(values),
                                     np.random.default_rng(0))
    model = assemble_model(ft_cfg, backbone, np.random.default_rng(0))
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items()
                           if k.startswith("model.")})
    return model, tensors["norm.mean"], tensors["norm.std"], values, meta


# ---------------------------------------------------------------------------
# label-fraction grid

@dataclass
class GridRow:
    mode: str
    init: str
    frozen: bool
    fraction: float
    seed: int
    miou: float
    pixel_accuracy: float
    per_class: np.ndarray
    # max |w_after - w_before| over backbone weights; None for backbone-free
    # or scratch cells. Diagnostic only, not part of the CSV schema.
    backbone_drift: Optional[float] = None

    def csv_cells(self) -> list:
        return ([self.mode, self.init, str(self.frozen).lower(),
                 format_float(self.fraction), self.seed,
                 float(self.miou), float(self.pixel_accuracy)]
                + [float(v) for v in self.per_class])


# The three table rows: scratch/unfrozen, pretrained/frozen,
# pretrained/unfrozen. Scratch with a frozen backbone would train a decoder
# on noise, so that combination is rejected, not silently run.
DEFAULT_VARIANTS = (("scratch", False), ("pretrained", True),
                    ("pretrained", False))


def experiment_grid(values: dict, data: PreparedData,
                    pretrained: Optional[VisionTransformer],
                    modes: Sequence[str] = ("attn_unet", "token_decoder"),
                    variants: Sequence[tuple[str, bool]] = DEFAULT_VARIANTS,
                    fractions: Sequence[float] = (0.1, 0.5, 1.0),
                    seeds: Sequence[int] = (0,),
                    csv_path=None,
                    progress: Optional[Callable] = None) -> list[GridRow]:
    """Sweep over decoder mode, (init, frozen) variant, labelled fraction,
    and seed. Each cell trains its own model; rows come out in loop order so
    the CSV is stable."""
    for init, frozen in variants:
        if init not in ("pretrained", "scratch"):
            raise ConfigError(f"unknown init {init!r}")
        if init == "scratch" and frozen:
            raise ConfigError("a frozen scratch backbone is untrainable "
                              "noise; pick pretrained+frozen or "
                              "scratch+unfrozen")
    if pretrained is None and any(init == "pretrained" for init, _ in variants) \
            and any(m != "unet_baseline" for m in modes):
        raise ConfigError("grid has pretrained rows but no pre-trained "
                          "backbone was given")
    rows = []
    for mode in modes:
        for init, frozen in variants:
            for fraction in fractions:
                for seed in seeds:
                    run_values = dict(values)
                    run_values["finetune.mode"] = mode
                    run_values["finetune.freeze_backbone"] = frozen
                    run_values["finetune.seed"] = seed
                    if mode == "unet_baseline":
                        bb = None
                    elif init == "pretrained":
                        bb = clone_backbone(pretrained)
                    else:
                        bb = VisionTransformer(
                            cf.build_vit_config(run_values),
                            np.random.default_rng(1000 + seed))
                    outcome = finetune_run(run_values, data, bb,
                                           fraction=fraction)
                    drift = None
                    if init == "pretrained" and outcome.model.backbone is not None:
                        before = pretrained.state_dict()
                        after = outcome.model.backbone.state_dict()
                        drift = max(float(np.max(np.abs(after[k] - before[k])))
                                    for k in before)
                    report = outcome.test_report
                    row = GridRow(mode=mode, init=init, frozen=frozen,
                                  fraction=fraction, seed=seed,
                                  miou=report.miou,
                                  pixel_accuracy=report.pixel_accuracy,
                                  per_class=report.per_class,
                                  backbone_drift=drift)
                    rows.append(row)
                    if progress is not None:
                        progress(row)
    if csv_path is not None:
        write_results_csv(csv_path, rows)
    return rows


def write_results_csv(path, rows: Sequence[GridRow]) -> str:
    return write_csv(path, RESULTS_HEADER, [r.csv_cells() for r in rows])


def write_config_snapshot(path, values: dict) -> None:
    """Sidecar recording the full run configuration (epochs included) in
    the same key=value syntax the --config flag accepts."""
    lines = [f"{key} = {cf.format_value(values[key])}" for key in cf.REGISTRY]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# pilot-frozen run configurations
#
# These are the settings behind the repeatable desk-scale demonstrations.
# They were tuned by pilot runs (entropies, trajectories, and margins are
# recorded in the tests that consume them) and should be changed together
# with those tests.

def collapse_values(seed: int = 0) -> dict:
    """Centering on/off comparison: 200 tiles, 200 steps, a learning rate
    high enough to collapse in that budget, and a center EMA fast enough
    to track it (0.9; the shipped default 0.99 moves 1%/step and cannot
    keep up at this lr, so both arms would collapse)."""
    return cf.resolve({
        "data.num_tiles": 200, "data.tile_size": 32, "data.seed": seed,
        "vit.preset": "desk",
        "dino.epochs": 8, "dino.max_steps": 200, "dino.batch_size": 8,
        "dino.lr": 1e-2, "dino.seed": seed,
        "dino.teacher_momentum": 0.95, "dino.center_momentum": 0.9,
        "dino.teacher_temp_start": 0.02, "dino.teacher_temp_end": 0.02,
    })


def overfit_values(mode: str) -> dict:
    """Ten-tile memorization fixtures. Six label classes: with eleven
    classes the interiors memorize fully but boundary-band errors cap the
    mean IoU below the target, a perimeter-to-area property of the label
    geometry rather than a wiring defect."""
    common = {
        "data.num_tiles": 20, "data.seed": 0, "data.num_classes": 6,
        "finetune.batch_size": 2, "finetune.epochs": 50, "finetune.lr": 3e-3,
    }
    if mode == "token_decoder":
        extra = {"data.tile_size": 64, "vit.preset": "desk",
                 "vit.image_size": 64, "vit.patch_size": 16,
                 "vit.embed_dim": 256}
    elif mode == "unet_baseline":
        extra = {"data.tile_size": 32}
    else:
        # 8x8 attention maps and eight heads give the attention-only
        # decoder enough spatial detail to memorize from
        extra = {"data.tile_size": 32, "vit.preset": "desk",
                 "vit.image_size": 32, "vit.patch_size": 4,
                 "vit.num_heads": 8}
    return cf.resolve({**common, **extra})


def grid_values(seed: int = 0) -> dict:
    """Label-fraction grid: one 64px corpus shared by both encodings, a
    short self-supervised run for the pretrained rows, and fine-tuning
    settings that fit the whole table in the acceptance budget."""
    return cf.resolve({
        "data.num_tiles": 40, "data.tile_size": 64, "data.seed": seed,
        "vit.preset": "desk", "vit.image_size": 64, "vit.patch_size": 16,
        "vit.embed_dim": 128,
        "dino.epochs": 40, "dino.batch_size": 8, "dino.lr": 2e-3,
        "dino.seed": seed,
        "dino.teacher_momentum": 0.95, "dino.center_momentum": 0.9,
        "dino.teacher_temp_start": 0.02, "dino.teacher_temp_end": 0.02,
        "finetune.epochs": 12, "finetune.lr": 3e-3, "finetune.batch_size": 2,
        "finetune.seed": seed,
        "finetune.unet_width1": 32, "finetune.unet_width2": 64,
        "finetune.unet_width3": 128,
    })


# ---------------------------------------------------------------------------
# overfit check

def overfit_run(values: dict, data: PreparedData, mode: str,
                backbone: Optional[VisionTransformer], num_tiles: int = 10,
                max_epochs: int = 50, target_miou: float = 0.8,
                progress: Optional[Callable] = None) -> tuple[float, int]:
    """Train on a handful of tiles and evaluate on those same tiles; a
    correct training path must be able to memorize them. Returns the best
    training-set mean IoU and the epoch that reached it."""
    run_values = dict(values)
    run_values["finetune.mode"] = mode
    run_values["finetune.freeze_backbone"] = False
    ft_cfg = cf.build_finetune_config(run_values)
    rng = np.random.default_rng(ft_cfg.seed)
    model = assemble_model(ft_cfg, backbone, rng)
    idx = list(data.split.train)[:num_tiles]
    channels = data.normalized(idx)
    labels = [data.tiles[i].labels for i in idx]
    optimizer = make_optimizer(ft_cfg.optimizer, model.trainable_parameters(),
                               lr=ft_cfg.lr)
    epoch_rng = np.random.default_rng([ft_cfg.seed, 7])
    best = 0.0
    best_epoch = 0
    for epoch in range(1, max_epochs + 1):
        finetune_epoch(model, channels, labels, optimizer, ft_cfg.batch_size,
                       epoch_rng, loss_kind=ft_cfg.loss)
        pairs = [(lab, predict_landcover(model, ch))
                 for ch, lab in zip(channels, labels)]
        score = evaluate_predictions(pairs, ft_cfg.num_classes).miou
        if progress is not None:
            progress({"epoch": epoch, "train_miou": score})
        if score > best:
            best, best_epoch = score, epoch
        if score >= target_miou:
            return score, epoch
    return best, best_epoch


# ---------------------------------------------------------------------------
# attention extraction

def attention_sheet(backbone: VisionTransformer, tiles: Sequence[RasterTile],
                    mean: np.ndarray, std: np.ndarray,
                    max_tiles: int = 8) -> np.ndarray:
    """Contact sheet [rows*H, (heads+1)*W] uint8: first column is the tile's
    first channel, the rest are per-head attention maps upsampled to pixels."""
    from .vit import normalize_attention_maps

    subset = list(tiles)[:max_tiles]
    if not subset:
        raise DataError("no tiles to render")
    h = subset[0].channels.shape[1]
    heads = backbone.cfg.num_heads
    sheet = np.zeros((len(subset) * h, (heads + 1) * h), dtype=np.uint8)
    for r, tile in enumerate(subset):
        normed = normalize_channels(tile.channels, mean, std)
        with ag.no_grad():
            out = backbone(Tensor(normed[None].astype(np.float32)))
            maps = normalize_attention_maps(out.attention_maps).data[0]
        base = normed[0]
        lo, hi = base.min(), base.max()
        sheet[r * h:(r + 1) * h, :h] = np.clip(
            255 * (base - lo) / max(hi - lo, 1e-6), 0, 255).astype(np.uint8)
        scale = h // maps.shape[-1]
        for head in range(heads):
            up = np.kron(maps[head], np.ones((scale, scale), dtype=np.float32))
            col = (head + 1) * h
            sheet[r * h:(r + 1) * h, col:col + h] = np.clip(
                255 * up, 0, 255).astype(np.uint8)
    return sheet


def save_attention_png(path, sheet: np.ndarray):
    from PIL import Image

    Image.fromarray(sheet, mode="L").save(path)
