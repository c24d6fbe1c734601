"""Synthetic SAR raster tiles, the SRT1 on-disk tile format, and the
latitude-band dataset split.

Each tile carries a 12-channel stack: four seasons, and per season the
VV backscatter, the VH backscatter, and their difference, all in dB.
Land-cover labels (11 classes) come from smoothed random fields, and the
backscatter is built from per-class seasonal signatures multiplied by
gamma-distributed speckle, so the channels genuinely predict the labels
while looking like multi-looked SAR imagery.

Splits are geographic rather than random: tiles fall into 1-degree
latitude bands, and whole bands are assigned round-robin to
train/train/train/val/test so no split shares a band with another.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, FormatError

NUM_CLASSES = 11
NUM_SEASONS = 4
CHANNELS_PER_SEASON = 3  # VV, VH, VV - VH
NUM_CHANNELS = NUM_SEASONS * CHANNELS_PER_SEASON

SEASONAL_CHANNEL_NAMES = tuple(
    f"s{s}_{kind}" for s in range(NUM_SEASONS) for kind in ("vv", "vh", "vv_minus_vh"))

# Per-class, per-season backscatter signatures in dB. Fixed across the whole
# synthetic world so that classes look the same from tile to tile.
_SIGNATURE_SEED = 7041
_sig_rng = np.random.default_rng(_SIGNATURE_SEED)
CLASS_VV_DB = (-12.0 + 4.0 * _sig_rng.standard_normal((NUM_CLASSES, NUM_SEASONS))).astype(np.float32)
CLASS_VH_DB = (-18.0 + 4.0 * _sig_rng.standard_normal((NUM_CLASSES, NUM_SEASONS))).astype(np.float32)
del _sig_rng


@dataclass
class RasterTile:
    channels: np.ndarray                  # [C, H, W] float32, dB domain
    lon: float = 0.0                      # degrees, tile center
    lat: float = 0.0
    labels: Optional[np.ndarray] = None   # [H, W] uint8 class ids
    channel_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3:
            raise DataError(f"channels must be [C,H,W], got shape "
                            f"{self.channels.shape}")
        c = self.channels.shape[0]
        if self.channel_names is None:
            self.channel_names = (SEASONAL_CHANNEL_NAMES if c == NUM_CHANNELS
                                  else tuple(f"ch{i}" for i in range(c)))
        else:
            self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != c:
            raise DataError(f"{len(self.channel_names)} channel names for "
                            f"{c} channels")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.channels.shape[1:]:
                raise DataError(f"label shape {self.labels.shape} does not "
                                f"match raster {self.channels.shape[1:]}")
            if self.labels.max(initial=0) >= NUM_CLASSES:
                raise DataError(f"label id {int(self.labels.max())} out of "
                                f"range [0, {NUM_CLASSES})")

    @property
    def width(self) -> int:
        return self.channels.shape[2]

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def size(self) -> int:
        return self.channels.shape[1]


@dataclass(frozen=True)
class SynthConfig:
    num_tiles: int = 100
    tile_size: int = 64
    seed: int = 0
    num_classes: int = NUM_CLASSES
    # equivalent number of looks for the gamma speckle; None is the
    # infinite-look (noise-free) limit
    speckle_looks: Optional[int] = 4
    label_sigma: float = 6.0     # smoothing radius of the label fields, in pixels
    texture_db: float = 1.0      # amplitude of smooth intra-class brightness drift
    band_height_deg: float = 1.0
    lat_origin_deg: float = -90.0

    def validate(self) -> "SynthConfig":
        if self.num_tiles < 1:
            raise ConfigError("num_tiles must be >= 1")
        if self.tile_size < 4:
            raise ConfigError("tile_size must be >= 4")
        if not 1 <= self.num_classes <= NUM_CLASSES:
            raise ConfigError(f"num_classes must be in [1, {NUM_CLASSES}]")
        if self.speckle_looks is not None and self.speckle_looks < 1:
            raise ConfigError("speckle_looks must be >= 1 (or None to disable)")
        return self


def stack_seasonal_channels(vv_db: np.ndarray, vh_db: np.ndarray) -> np.ndarray:
    """Interleave per-season channels season-major: for each season s the
    triplet (VV_s, VH_s, VV_s - VH_s). Inputs are [S, H, W] in dB."""
    if vv_db.shape != vh_db.shape or vv_db.ndim != 3:
        raise DataError(f"seasonal stacks must share [S,H,W] shape, got "
                        f"{vv_db.shape} and {vh_db.shape}")
    s, h, w = vv_db.shape
    out = np.empty((s * CHANNELS_PER_SEASON, h, w), dtype=np.float32)
    out[0::3] = vv_db
    out[1::3] = vh_db
    out[2::3] = vv_db - vh_db
    return out


def speckle_db(rng: np.random.Generator, shape, looks: int) -> np.ndarray:
    """Multiplicative gamma speckle expressed additively in the dB domain.

    Intensity speckle for an L-look SAR product is Gamma(L, 1/L) with unit
    mean; taking 10*log10 turns it into additive noise on dB channels.
    """
    g = rng.gamma(shape=looks, scale=1.0 / looks, size=shape)
    return (10.0 * np.log10(g)).astype(np.float32)


def synthesize_labels(rng: np.random.Generator, size: int, sigma: float,
                      num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Contiguous land-cover regions: argmax over smoothed random fields."""
    fields = rng.standard_normal((num_classes, size, size))
    for k in range(num_classes):
        fields[k] = gaussian_filter(fields[k], sigma=sigma, mode="wrap")
    return fields.argmax(axis=0).astype(np.uint8)


def synthesize_tile(cfg: SynthConfig, index: int) -> RasterTile:
    rng = np.random.default_rng([cfg.seed, index])
    labels = synthesize_labels(rng, cfg.tile_size, cfg.label_sigma,
                               cfg.num_classes)
    vv = np.empty((NUM_SEASONS, cfg.tile_size, cfg.tile_size), dtype=np.float32)
    vh = np.empty_like(vv)
    for s in range(NUM_SEASONS):
        texture = gaussian_filter(rng.standard_normal(labels.shape),
                                  sigma=4.0, mode="wrap") * cfg.texture_db
        vv[s] = CLASS_VV_DB[labels, s] + texture
        vh[s] = CLASS_VH_DB[labels, s] + texture
        if cfg.speckle_looks is not None:
            vv[s] += speckle_db(rng, labels.shape, cfg.speckle_looks)
            vh[s] += speckle_db(rng, labels.shape, cfg.speckle_looks)
    channels = stack_seasonal_channels(vv, vh)
    # latitudes walk one band per tile, so bands (and splits) fill evenly
    lat = cfg.lat_origin_deg + (index % 120) * cfg.band_height_deg \
        + 0.5 * cfg.band_height_deg + 30.0
    lon = ((index * 37) % 360) - 180 + 0.5
    return RasterTile(channels=channels, lon=lon, lat=lat, labels=labels)


def synthesize_dataset(cfg: SynthConfig, n: Optional[int] = None) -> list[RasterTile]:
    cfg.validate()
    count = cfg.num_tiles if n is None else n
    if count < 1:
        raise ConfigError("need at least one tile")
    return [synthesize_tile(cfg, i) for i in range(count)]


# ---------------------------------------------------------------------------
# splits

@dataclass
class DatasetSplit:
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def counts(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def latitude_band(lat: float, origin: float = -90.0, height: float = 1.0) -> int:
    return int(np.floor((lat - origin) / height))


def _band_pattern(fractions: Sequence[float]) -> list[int]:
    """Smallest round-robin slot pattern realizing the split fractions,
    e.g. (0.6, 0.2, 0.2) -> [0,0,0,1,2]."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three values summing to 1, "
                          f"got {fractions}")
    for m in range(1, 101):
        counts = [f * m for f in fractions]
        if all(abs(c - round(c)) < 1e-9 and round(c) >= (f > 0)
               for c, f in zip(counts, fractions)):
            pattern = []
            for slot, c in enumerate(counts):
                pattern.extend([slot] * int(round(c)))
            return pattern
    raise ConfigError(f"fractions {fractions} have no small integer ratio")


def geographic_band_split(tiles: Sequence[RasterTile],
                          fractions: Sequence[float] = (0.6, 0.2, 0.2),
                          band_height_deg: float = 1.0,
                          origin_deg: float = -90.0) -> DatasetSplit:
    """Assign whole latitude bands round-robin, by default as
    train,train,train,val,test.

    Keeping bands intact means no split ever contains a tile from another
    split's band, which is the leakage control the evaluation depends on.
    """
    if band_height_deg <= 0:
        raise ConfigError("band_height_deg must be positive")
    pattern = _band_pattern(fractions)
    split = DatasetSplit()
    buckets = (split.train, split.val, split.test)
    for i, tile in enumerate(tiles):
        band = latitude_band(tile.lat, origin_deg, band_height_deg)
        buckets[pattern[band % len(pattern)]].append(i)
    if not split.train or not split.val or not split.test:
        raise DataError(f"degenerate split: counts {split.counts()} from "
                        f"{len(tiles)} tiles")
    return split


def subsample_fraction(items: Sequence, fraction: float, seed: int) -> list:
    """Deterministic nested subsets: the kept set at a smaller fraction is
    always contained in the kept set at a larger fraction (same seed),
    because both are prefixes of one seeded permutation. Keeps
    max(1, round(fraction * len(items)))."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = len(items)
    if n == 0:
        raise DataError("cannot subsample an empty list")
    k = max(1, int(round(fraction * n)))
    order = np.random.default_rng(seed).permutation(n)[:k]
    return [items[i] for i in order]


# ---------------------------------------------------------------------------
# normalization

def compute_normalization(tiles: Sequence[RasterTile]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over every pixel of `tiles`.
    Zero-variance channels get std 1 (with a warning) so they standardize
    to zeros instead of blowing up."""
    if len(tiles) < 2:
        raise DataError(f"need at least 2 tiles for normalization statistics, "
                        f"got {len(tiles)}")
    c = tiles[0].channels.shape[0]
    total = np.zeros(c, dtype=np.float64)
    total_sq = np.zeros(c, dtype=np.float64)
    count = 0
    for tile in tiles:
        flat = tile.channels.reshape(c, -1).astype(np.float64)
        total += flat.sum(axis=1)
        total_sq += (flat * flat).sum(axis=1)
        count += flat.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    dead = std < 1e-7
    if dead.any():
        warnings.warn(f"zero-variance channels {np.flatnonzero(dead).tolist()}; "
                      f"using std 1", RuntimeWarning, stacklevel=2)
        std = np.where(dead, 1.0, std)
    return mean.astype(np.float32), std.astype(np.float32)


def normalize_channels(channels: np.ndarray, mean: np.ndarray,
                       std: np.ndarray) -> np.ndarray:
    return ((channels - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# SRT1 tile format
#
# One tile per file, all little-endian:
#   magic     8s   "SARTILE1"
#   version   u16  currently 1
#   channels  u16  channel count C
#   width     u32
#   height    u32
#   lon, lat  f64 each
#   has_labels u8
#   name table: u16 count, then per name u16 byte length + UTF-8 bytes
#   channel payload  C*H*W f32 row-major
#   label payload    H*W u8 row-major (only if has_labels)

SRT1_MAGIC = b"SARTILE1"
SRT1_VERSION = 1
_FIXED_HEADER = struct.Struct("<8sHHIIddB")


def save_tile(path, tile: RasterTile):
    c, h, w = tile.channels.shape
    parts = [_FIXED_HEADER.pack(SRT1_MAGIC, SRT1_VERSION, c, w, h,
                                tile.lon, tile.lat, int(tile.labels is not None))]
    parts.append(struct.pack("<H", len(tile.channel_names)))
    for name in tile.channel_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.ascontiguousarray(tile.channels, dtype="<f4").tobytes())
    if tile.labels is not None:
        parts.append(np.ascontiguousarray(tile.labels, dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}: needed "
                              f"{n} bytes, had {len(self.data) - self.pos}",
                              offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_tile(path) -> RasterTile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(SRT1_MAGIC):
        raise FormatError("file too short for magic", offset=0)
    if data[:len(SRT1_MAGIC)] != SRT1_MAGIC:
        raise FormatError(f"bad magic {data[:len(SRT1_MAGIC)]!r}, expected "
                          f"{SRT1_MAGIC!r}", offset=0)
    reader = _Reader(data)
    raw = reader.take(_FIXED_HEADER.size, "header")
    _magic, version, c, w, h, lon, lat, has_labels = _FIXED_HEADER.unpack(raw)
    if version != SRT1_VERSION:
        raise FormatError(f"unsupported version {version}, expected "
                          f"{SRT1_VERSION}", offset=len(SRT1_MAGIC))
    (name_count,) = struct.unpack("<H", reader.take(2, "channel-name count"))
    if name_count != c:
        raise FormatError(f"{name_count} channel names for {c} channels",
                          offset=reader.pos - 2)
    names = []
    for i in range(name_count):
        (ln,) = struct.unpack("<H", reader.take(2, f"name {i} length"))
        names.append(reader.take(ln, f"name {i}").decode("utf-8"))
    channels = np.frombuffer(reader.take(c * h * w * 4, "channel payload"),
                             dtype="<f4").reshape(c, h, w).copy()
    labels = None
    if has_labels:
        labels = np.frombuffer(reader.take(h * w, "label payload"),
                               dtype=np.uint8).reshape(h, w).copy()
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes",
                          offset=reader.pos)
    return RasterTile(channels=channels, lon=lon, lat=lat, labels=labels,
                      channel_names=tuple(names))


# ---------------------------------------------------------------------------
# dataset directories: one SRT1 file per tile plus a manifest

MANIFEST_NAME = "manifest.csv"


def save_dataset(directory, tiles: Sequence[RasterTile]) -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["id,file,lon,lat,split"]
    files = []
    for i, tile in enumerate(tiles):
        fname = f"tile_{i:05d}.srt1"
        save_tile(directory / fname, tile)
        lines.append(f"{i},{fname},{repr(float(tile.lon))},"
                     f"{repr(float(tile.lat))},unassigned")
        files.append(fname)
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return files


def load_dataset(directory) -> list[RasterTile]:
    directory = Path(directory)
    manifest = directory / MANIFEST_NAME
    if manifest.exists():
        rows = manifest.read_text(encoding="utf-8").splitlines()
        if not rows or not rows[0].startswith("id,"):
            raise FormatError(f"malformed manifest {manifest}", offset=0)
        names = [line.split(",")[1] for line in rows[1:] if line.strip()]
    else:
        names = sorted(p.name for p in directory.glob("*.srt1"))
    if not names:
        raise DataError(f"no tiles found under {directory}")
    return [load_tile(directory / name) for name in names]
