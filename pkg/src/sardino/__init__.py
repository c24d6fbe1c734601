"""Self-supervised ViT pre-training and land-cover segmentation on
synthetic multi-channel SAR tiles, built on a small numpy autograd core.

Most workflows go through the command line (``python -m sardino``) or the
orchestration helpers in :mod:`sardino.experiments`; the re-exports below
cover the names needed to script against the library directly.
"""

from .errors import (
    SardinoError, ShapeError, StateError, ConfigError,
    DataError, FormatError, NumericError, CollapseError,
)
from .geodata import (
    RasterTile, SynthConfig, synthesize_dataset, geographic_band_split,
    save_tile, load_tile, save_dataset, load_dataset,
)
from .vit import ViTConfig, VisionTransformer, count_parameters
from .dino import DinoConfig, pretrain, dino_loss, collapse_detected
from .decoders import FineTuneConfig, SegModel, assemble_model, predict_landcover
from .metrics import ConfusionMatrix, miou, iou_per_class, evaluate_model
from .checkpoint import save_checkpoint, load_checkpoint
from .gradcheck import run_battery, format_report

__version__ = "0.1.0"

__all__ = [
    "SardinoError", "ShapeError", "StateError", "ConfigError",
    "DataError", "FormatError", "NumericError", "CollapseError",
    "RasterTile", "SynthConfig", "synthesize_dataset", "geographic_band_split",
    "save_tile", "load_tile", "save_dataset", "load_dataset",
    "ViTConfig", "VisionTransformer", "count_parameters",
    "DinoConfig", "pretrain", "dino_loss", "collapse_detected",
    "FineTuneConfig", "SegModel", "assemble_model", "predict_landcover",
    "ConfusionMatrix", "miou", "iou_per_class", "evaluate_model",
    "save_checkpoint", "load_checkpoint",
    "run_battery", "format_report",
    "__version__",
]
