"""Flat key=value run configuration.

One file, `key = value` per line, `#` comments. Every key lives in a
typed registry; unknown keys are an error rather than a silent ignore,
because a typo in a hyperparameter name should never produce a quietly
different experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .decoders import MODES, FineTuneConfig
from .dino import DinoConfig
from .errors import ConfigError
from .geodata import SynthConfig
from .vit import PRESETS, ViTConfig


@dataclass(frozen=True)
class Option:
    key: str
    kind: str                 # int | float | bool | str | optional_int | pair
    default: object
    help: str = ""
    choices: tuple = ()


def _opts(*options: Option) -> dict[str, Option]:
    return {o.key: o for o in options}


REGISTRY: dict[str, Option] = _opts(
    # synthetic data
    Option("data.num_tiles", "int", 100, "number of tiles to synthesize"),
    Option("data.tile_size", "int", 64, "tile side length in pixels"),
    Option("data.seed", "int", 0, "world seed for the synthetic generator"),
    Option("data.speckle_looks", "optional_int", 4,
           "equivalent number of looks (none disables speckle)"),
    Option("data.label_sigma", "float", 6.0, "label field smoothing radius"),
    Option("data.num_classes", "int", 11, "distinct land-cover classes"),

    # encoder
    Option("vit.preset", "str", "desk",
           "tiny (embed 192, depth 12, heads 3), base (embed 768, depth 12, "
           "heads 12), or desk (embed 64, depth 4, heads 4)",
           choices=("tiny", "base", "desk")),
    Option("vit.image_size", "int", 0, "override preset input size (0 keeps preset)"),
    Option("vit.patch_size", "int", 0, "override preset patch size (0 keeps preset)"),
    Option("vit.in_channels", "int", 12, "raster channels fed to the encoder"),
    Option("vit.embed_dim", "int", 0, "override preset embedding width (0 keeps preset)"),
    Option("vit.depth", "int", 0, "override preset block count (0 keeps preset)"),
    Option("vit.num_heads", "int", 0, "override preset head count (0 keeps preset)"),

    # pre-training
    Option("dino.out_dim", "int", 256, "number of prototypes"),
    Option("dino.hidden_dim", "int", 256, "projection head hidden width"),
    Option("dino.bottleneck_dim", "int", 64, "projection head bottleneck width"),
    Option("dino.student_temp", "float", 0.03, "student softmax temperature"),
    Option("dino.teacher_temp_start", "float", 0.01, "teacher temperature at epoch 0"),
    Option("dino.teacher_temp_end", "float", 0.001, "teacher temperature after warm-up"),
    Option("dino.teacher_temp_warm_epochs", "float", 5.0,
           "epochs over which the teacher temperature anneals"),
    Option("dino.center_momentum", "float", 0.99, "EMA momentum of the logit center"),
    Option("dino.teacher_momentum", "float", 0.996, "EMA momentum of teacher weights"),
    Option("dino.centering", "bool", True, "subtract the running center (collapse control)"),
    Option("dino.n_local", "int", 4, "local crops per tile"),
    Option("dino.jitter", "float", 0.2, "brightness jitter on normalized crops"),
    Option("dino.lr", "float", 1e-6, "pre-training learning rate"),
    Option("dino.optimizer", "str", "adam", "", choices=("adam", "sgd")),
    Option("dino.batch_size", "int", 8, "tiles per pre-training step"),
    Option("dino.epochs", "int", 1, "pre-training epochs"),
    Option("dino.max_steps", "optional_int", None, "hard step cap (none disables)"),
    Option("dino.global_scale", "pair", (0.5, 1.0), "area range of global crops"),
    Option("dino.local_scale", "pair", (0.2, 0.5), "area range of local crops"),
    Option("dino.entropy_floor", "float", 0.5,
           "collapse alarm: mean epoch entropy (nats) below this for 3 "
           "epochs aborts with a diagnostic (0 disables)"),
    Option("dino.seed", "int", 0, "pre-training seed"),

    # fine-tuning
    Option("finetune.mode", "str", "unet_plus_attention", "decoder assembly",
           choices=MODES),
    Option("finetune.freeze_backbone", "bool", True, "train decoder only"),
    Option("finetune.loss", "str", "ce", "", choices=("ce", "per_class_sigmoid")),
    Option("finetune.lr", "float", 1e-3, "fine-tuning learning rate"),
    Option("finetune.optimizer", "str", "adam", "", choices=("adam", "sgd")),
    Option("finetune.batch_size", "int", 4, "tiles per fine-tuning step"),
    Option("finetune.epochs", "int", 20, "fine-tuning epochs"),
    Option("finetune.unet_width1", "int", 64, "U-Net stage 1 width"),
    Option("finetune.unet_width2", "int", 128, "U-Net stage 2 width"),
    Option("finetune.unet_width3", "int", 256, "U-Net stage 3 width"),
    Option("finetune.seed", "int", 0, "fine-tuning seed"),
)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: cannot parse {raw!r} as a boolean")


def parse_value(key: str, raw: str):
    if key not in REGISTRY:
        raise ConfigError(f"unknown configuration key {key!r}")
    opt = REGISTRY[key]
    raw = raw.strip()
    try:
        if opt.kind == "int":
            value = int(raw)
        elif opt.kind == "float":
            value = float(raw)
        elif opt.kind == "bool":
            value = _parse_bool(raw, key)
        elif opt.kind == "optional_int":
            value = None if raw.lower() in ("none", "") else int(raw)
        elif opt.kind == "pair":
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            value = (parts[0], parts[1])
        else:
            value = raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {opt.kind} ({exc})")
    if opt.choices and value not in opt.choices:
        raise ConfigError(f"{key}: {value!r} not one of {opt.choices}")
    return value


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def resolve(explicit: Optional[dict] = None) -> dict:
    values = {key: opt.default for key, opt in REGISTRY.items()}
    if explicit:
        for key in explicit:
            if key not in REGISTRY:
                raise ConfigError(f"unknown configuration key {key!r}")
        values.update(explicit)
    return values


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return np.format_float_positional(value, trim="-")
    if isinstance(value, tuple):
        return ",".join(np.format_float_positional(v, trim="-") for v in value)
    return str(value)


def dump_defaults() -> str:
    lines = ["# default run configuration; every recognized key with its default"]
    section = None
    for key, opt in REGISTRY.items():
        sec = key.split(".", 1)[0]
        if sec != section:
            lines.append("")
            section = sec
        if opt.help:
            lines.append(f"# {opt.help}")
        lines.append(f"{key} = {format_value(opt.default)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# builders

def build_synth_config(values: dict) -> SynthConfig:
    return SynthConfig(num_tiles=values["data.num_tiles"],
                       tile_size=values["data.tile_size"],
                       seed=values["data.seed"],
                       num_classes=values["data.num_classes"],
                       speckle_looks=values["data.speckle_looks"],
                       label_sigma=values["data.label_sigma"]).validate()


def build_vit_config(values: dict) -> ViTConfig:
    cfg = PRESETS[values["vit.preset"]](in_channels=values["vit.in_channels"])
    overrides = {}
    for field, key in (("image_size", "vit.image_size"),
                       ("patch_size", "vit.patch_size"),
                       ("embed_dim", "vit.embed_dim"),
                       ("depth", "vit.depth"),
                       ("num_heads", "vit.num_heads")):
        if values[key]:
            overrides[field] = values[key]
    if overrides:
        cfg = replace(cfg, **overrides).validate()
    return cfg


def build_dino_config(values: dict) -> DinoConfig:
    return DinoConfig(out_dim=values["dino.out_dim"],
                      hidden_dim=values["dino.hidden_dim"],
                      bottleneck_dim=values["dino.bottleneck_dim"],
                      student_temp=values["dino.student_temp"],
                      teacher_temp_start=values["dino.teacher_temp_start"],
                      teacher_temp_end=values["dino.teacher_temp_end"],
                      teacher_temp_warm_epochs=values["dino.teacher_temp_warm_epochs"],
                      center_momentum=values["dino.center_momentum"],
                      teacher_momentum=values["dino.teacher_momentum"],
                      centering=values["dino.centering"],
                      n_local=values["dino.n_local"],
                      jitter=values["dino.jitter"],
                      lr=values["dino.lr"],
                      optimizer=values["dino.optimizer"],
                      batch_size=values["dino.batch_size"],
                      epochs=values["dino.epochs"],
                      max_steps=values["dino.max_steps"],
                      global_scale=values["dino.global_scale"],
                      local_scale=values["dino.local_scale"],
                      seed=values["dino.seed"]).validate()


def build_finetune_config(values: dict) -> FineTuneConfig:
    widths = (values["finetune.unet_width1"], values["finetune.unet_width2"],
              values["finetune.unet_width3"])
    return FineTuneConfig(mode=values["finetune.mode"],
                          freeze_backbone=values["finetune.freeze_backbone"],
                          loss=values["finetune.loss"],
                          lr=values["finetune.lr"],
                          optimizer=values["finetune.optimizer"],
                          batch_size=values["finetune.batch_size"],
                          epochs=values["finetune.epochs"],
                          unet_widths=widths,
                          seed=values["finetune.seed"]).validate()


def snapshot(values: dict) -> dict[str, str]:
    """String form of every setting, for embedding in checkpoints."""
    return {key: format_value(values[key]) for key in REGISTRY}


def from_snapshot(meta: dict[str, str]) -> dict:
    explicit = {key: parse_value(key, raw) for key, raw in meta.items()
                if key in REGISTRY}
    return resolve(explicit)
