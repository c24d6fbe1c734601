"""Command-line front end.

One binary with subcommands (synth, pretrain, finetune, evaluate,
extract-attention, gradcheck) sharing a flat key=value configuration.
Exit codes: 0 success, 2 usage/config error, 3 data/format error,
4 numeric failure (NaN, gradient check failure, collapse).

Imports of the numeric stack are deferred so that `--threads N` can pin
BLAS thread-pool environment variables before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import (CollapseError, ConfigError, DataError, FormatError,
                     NumericError)

_THREAD_GUARD = "SARDINO_THREADS_PINNED"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _pin_threads(argv: list[str]) -> None:
    """Re-exec with BLAS thread env vars set if --threads was requested.

    Must run before numpy is imported anywhere in the process; the guard
    variable stops the second pass from exec-ing again.
    """
    if os.environ.get(_THREAD_GUARD):
        return
    n = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            n = argv[i + 1]
        elif arg.startswith("--threads="):
            n = arg.split("=", 1)[1]
    if n is None:
        return
    try:
        int(n)
    except ValueError:
        return  # let argparse produce the usage error
    for var in _THREAD_VARS:
        os.environ[var] = n
    os.environ[_THREAD_GUARD] = "1"
    os.execv(sys.executable, [sys.executable, "-m", "sardino"] + list(argv))


def _bool_arg(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"cannot parse {raw!r} as a boolean")


def _resolve_values(ns: argparse.Namespace) -> dict:
    from . import config as cf
    explicit = {}
    if getattr(ns, "config", None):
        explicit.update(cf.load_config(ns.config))
    for item in getattr(ns, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        explicit[key.strip()] = cf.parse_value(key.strip(), raw)
    return cf.resolve(explicit)


def _metrics_path(ns: argparse.Namespace) -> str:
    if getattr(ns, "metrics", None):
        return ns.metrics
    return os.path.splitext(str(ns.out))[0] + ".metrics.csv"


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(ns: argparse.Namespace) -> int:
    from . import config as cf
    from .geodata import save_dataset, synthesize_dataset

    values = _resolve_values(ns)
    values["data.num_tiles"] = ns.n
    if ns.seed is not None:
        values["data.seed"] = ns.seed
    if ns.size is not None:
        values["data.tile_size"] = ns.size
    if ns.n <= 0:
        raise ConfigError(f"--n must be a positive tile count, got {ns.n}")
    cfg = cf.build_synth_config(values)
    tiles = synthesize_dataset(cfg)
    save_dataset(ns.out, tiles)
    print(f"wrote {len(tiles)} tiles ({cfg.tile_size}x{cfg.tile_size} px, "
          f"seed {cfg.seed}) to {ns.out}")
    return 0


def cmd_pretrain(ns: argparse.Namespace) -> int:
    from .dino import collapse_detected
    from .experiments import prepare_data, pretrain_run
    from .geodata import load_dataset

    values = _resolve_values(ns)
    tiles = load_dataset(ns.data)
    data = prepare_data(values, tiles)
    metrics = _metrics_path(ns)
    print(f"pre-training on {len(data.split.train)} of {len(tiles)} tiles "
          f"(train split), {values['dino.epochs']} epochs")
    result = pretrain_run(values, data, checkpoint_path=ns.out,
                          history_path=metrics)
    for h in result.epoch_history:
        print(f"epoch {h['epoch']}: loss {h['loss']:.4f} "
              f"entropy {h['entropy']:.4f} teacher_temp {h['teacher_temp']:.4g}")
    print(f"checkpoint: {ns.out}")
    print(f"metrics: {metrics}")
    floor = values["dino.entropy_floor"]
    if collapse_detected(result.epoch_history, floor):
        raise CollapseError(
            f"teacher entropy stayed below {floor} nats for 3 consecutive "
            "epochs; the run collapsed to a degenerate representation. "
            "Checkpoint and metrics were written for inspection.")
    return 0


def cmd_finetune(ns: argparse.Namespace) -> int:
    import numpy as np

    from . import config as cf
    from .decoders import MODES
    from .experiments import (finetune_run, format_float,
                              load_pretrained_backbone, prepare_data,
                              save_finetune_checkpoint, write_csv)
    from .geodata import load_dataset, subsample_fraction
    from .vit import VisionTransformer

    values = _resolve_values(ns)
    values["finetune.mode"] = ns.mode
    values["finetune.freeze_backbone"] = ns.freeze
    if not 0.0 < ns.fraction <= 1.0:
        raise ConfigError(f"--fraction must be in (0, 1], got {ns.fraction}")
    scratch = ns.init == "scratch"
    if ns.freeze and scratch:
        raise ConfigError("--freeze true requires a pre-trained --init "
                          "checkpoint; a frozen random backbone is "
                          "untrainable noise")

    mean = std = None
    if ns.mode == "unet_baseline":
        if not scratch:
            print(f"warning: mode unet_baseline has no encoder backbone; "
                  f"ignoring --init {ns.init}", file=sys.stderr)
        backbone = None
    elif scratch:
        backbone = VisionTransformer(
            cf.build_vit_config(values),
            np.random.default_rng(1000 + values["finetune.seed"]))
    else:
        backbone, mean, std, ckpt_values = load_pretrained_backbone(ns.init)
        for key in values:
            if key.startswith("vit."):
                values[key] = ckpt_values[key]

    tiles = load_dataset(ns.data)
    data = prepare_data(values, tiles)
    if mean is not None:
        data.mean, data.std = mean, std

    n_train = len(data.split.train)
    n_used = len(subsample_fraction(list(data.split.train), ns.fraction,
                                    seed=values["finetune.seed"]))
    print(f"fine-tuning {ns.mode} ({ns.init}, "
          f"{'frozen' if ns.freeze else 'unfrozen'}) on {n_used} of "
          f"{n_train} train tiles (fraction {ns.fraction})")
    if ns.mode == "unet_baseline":
        in_ch = tiles[0].channels.shape[0]
    elif ns.mode == "attn_unet":
        in_ch = backbone.cfg.num_heads
    elif ns.mode == "unet_plus_attention":
        in_ch = tiles[0].channels.shape[0] + backbone.cfg.num_heads
    else:
        in_ch = backbone.cfg.embed_dim
    print(f"input channels: {in_ch}")

    outcome = finetune_run(
        values, data, backbone, fraction=ns.fraction,
        progress=lambda r: print(
            f"epoch {r['epoch']}: train loss {r['train_loss']:.4f} "
            f"train miou {r['train_miou']:.4f} val miou {r['val_miou']:.4f}"))

    metrics = _metrics_path(ns)
    write_csv(metrics, ["epoch", "train_loss", "train_miou", "val_miou"],
              [[r["epoch"], float(r["train_loss"]), float(r["train_miou"]),
                float(r["val_miou"])] for r in outcome.history])
    init_name = "scratch" if scratch else "pretrained"
    save_finetune_checkpoint(ns.out, outcome, values, data.mean, data.std,
                             extra={"init": init_name,
                                    "fraction": format_float(ns.fraction)})
    print(f"best val miou {outcome.best_val_miou:.4f} "
          f"(epoch {outcome.best_epoch})")
    if outcome.test_report is not None:
        print(f"test miou {outcome.test_report.miou:.4f}")
    print(f"checkpoint: {ns.out}")
    print(f"metrics: {metrics}")
    return 0


def cmd_evaluate(ns: argparse.Namespace) -> int:
    from . import config as cf
    from .decoders import predict_landcover
    from .experiments import GridRow, load_finetune_model, write_results_csv
    from .geodata import geographic_band_split, load_dataset, normalize_channels
    from .metrics import evaluate_model

    model, mean, std, values, meta = load_finetune_model(ns.model)
    tiles = load_dataset(ns.data)
    split = geographic_band_split(tiles)
    indices = getattr(split, ns.split)
    if not indices:
        raise DataError(f"split {ns.split!r} is empty for {len(tiles)} tiles")
    report = evaluate_model(
        lambda ch: predict_landcover(model, ch),
        [tiles[i] for i in indices],
        num_classes=cf.build_finetune_config(values).num_classes,
        transform=lambda ch: normalize_channels(ch, mean, std))
    row = GridRow(mode=values["finetune.mode"],
                  init=meta.get("init", "unknown"),
                  frozen=values["finetune.freeze_backbone"],
                  fraction=float(meta.get("fraction", "1.0")),
                  seed=values["finetune.seed"],
                  miou=report.miou,
                  pixel_accuracy=report.pixel_accuracy,
                  per_class=report.per_class)
    if ns.out is not None:
        write_results_csv(ns.out, [row])
        print(f"results: {ns.out}")
    print(f"{ns.split} miou: {report.miou:.6f} "
          f"(pixel accuracy {report.pixel_accuracy:.6f}, "
          f"{report.tiles_evaluated} tiles)")
    return 0


def cmd_extract_attention(ns: argparse.Namespace) -> int:
    import numpy as np

    from . import autograd as ag
    from .autograd import Tensor
    from .checkpoint import load_checkpoint
    from .experiments import (attention_sheet, load_finetune_model,
                              load_pretrained_backbone, save_attention_png)
    from .geodata import RasterTile, load_dataset, normalize_channels, save_tile
    from .vit import normalize_attention_maps

    _, meta = load_checkpoint(ns.model)
    kind = meta.get("kind")
    if kind == "pretrain":
        backbone, mean, std, _ = load_pretrained_backbone(ns.model)
    elif kind == "finetune":
        model, mean, std, _, _ = load_finetune_model(ns.model)
        backbone = model.backbone
        if backbone is None:
            raise ConfigError("checkpoint holds a plain U-Net with no "
                              "attention backbone; nothing to extract")
    else:
        raise FormatError(f"checkpoint kind {kind!r} has no backbone")

    tiles = load_dataset(ns.data)
    side = backbone.cfg.image_size
    os.makedirs(ns.out, exist_ok=True)
    heads = backbone.cfg.num_heads
    for i, tile in enumerate(tiles):
        if tile.width != side or tile.height != side:
            raise ConfigError(
                f"tile {i} is {tile.width}x{tile.height} px but the "
                f"checkpoint encoder expects {side}x{side}")
        x = normalize_channels(tile.channels, mean, std)[None].astype(np.float32)
        with ag.no_grad():
            out = backbone(Tensor(x))
            maps = normalize_attention_maps(out.attention_maps).data[0]
        raster = RasterTile(channels=maps.astype(np.float32),
                            lon=tile.lon, lat=tile.lat,
                            channel_names=[f"head_{j}" for j in range(heads)])
        save_tile(os.path.join(ns.out, f"tile_{i:05d}_attention.srt1"), raster)
        sheet = attention_sheet(backbone, [tile], mean, std, max_tiles=1)
        save_attention_png(os.path.join(ns.out, f"tile_{i:05d}_attention.png"),
                           sheet)
    if tiles:
        sheet = attention_sheet(backbone, tiles, mean, std, max_tiles=8)
        save_attention_png(os.path.join(ns.out, "contact_sheet.png"), sheet)
    print(f"wrote {len(tiles)} attention rasters ({heads} heads each) "
          f"to {ns.out}")
    return 0


def cmd_gradcheck(ns: argparse.Namespace) -> int:
    from .gradcheck import format_report, run_battery

    results = run_battery(seed=ns.seed,
                          include_composite=not ns.skip_composite)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError("gradient checks failed for: " + ", ".join(failed))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value configuration file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append",
                        help="override one configuration key (repeatable)")
    common.add_argument("--threads", type=int, metavar="N",
                        help="pin BLAS thread pools (1 for bit-exact reruns)")

    parser = argparse.ArgumentParser(
        prog="sardino",
        description="Self-supervised pre-training and land-cover "
                    "segmentation on synthetic SAR tiles.")
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print every configuration key with its default "
                             "and exit")
    parser.add_argument("--threads", type=int, metavar="N",
                        help="pin BLAS thread pools (1 for bit-exact reruns)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic labelled tile directory")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n", required=True, type=int, metavar="N",
                   help="number of tiles")
    p.add_argument("--seed", type=int, metavar="S")
    p.add_argument("--size", type=int, metavar="PX", help="tile side length")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common],
                       help="self-supervised pre-training on a tile directory")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--metrics", metavar="CSV",
                   help="per-epoch loss/entropy CSV (default: next to --out)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="train a segmentation decoder on labelled tiles")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--mode", required=True,
                   choices=("unet_baseline", "attn_unet",
                            "unet_plus_attention", "token_decoder"))
    p.add_argument("--init", default="scratch", metavar="{scratch|CKPT}",
                   help="'scratch' or a pre-training checkpoint path")
    p.add_argument("--freeze", type=_bool_arg, default=False, metavar="BOOL",
                   help="freeze the encoder and train the decoder only")
    p.add_argument("--fraction", type=float, default=1.0, metavar="F",
                   help="labelled fraction of the train split")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--metrics", metavar="CSV",
                   help="per-epoch train/val MIOU CSV (default: next to --out)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a fine-tuned checkpoint on a split")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", metavar="CSV", help="results CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("extract-attention", parents=[common],
                       help="write per-tile attention rasters and PNG sheets")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_extract_attention)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every op and one "
                            "composite model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-composite", action="store_true",
                   help="ops only (faster)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
        _pin_threads(argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.dump_defaults:
        from . import config as cf
        sys.stdout.write(cf.dump_defaults())
        return 0
    if ns.command is None:
        parser.error("a command is required (see --help)")
    try:
        return ns.func(ns)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
