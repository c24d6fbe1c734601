"""Synthetic data, split, and SRT1 tile-format tests.

Split counts are re-derived with an independent per-tile band
computation, and the format tests cover truncation, trailing garbage,
and version mismatches, not just the round trip.
"""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sardino import geodata as gd
from sardino.errors import ConfigError, DataError, FormatError


def small_cfg(**overrides):
    base = dict(num_tiles=12, tile_size=16, seed=3)
    base.update(overrides)
    return gd.SynthConfig(**base)


# ---------------------------------------------------------------------------
# channel stacking and speckle

def test_stack_seasonal_channel_order():
    s, h, w = 4, 2, 2
    vv = np.arange(s * h * w, dtype=np.float32).reshape(s, h, w)
    vh = -np.ones((s, h, w), dtype=np.float32)
    out = gd.stack_seasonal_channels(vv, vh)
    assert out.shape == (12, 2, 2)
    for season in range(s):
        np.testing.assert_array_equal(out[3 * season], vv[season])
        np.testing.assert_array_equal(out[3 * season + 1], vh[season])
        np.testing.assert_array_equal(out[3 * season + 2], vv[season] - vh[season])


def test_stack_equal_polarizations_zero_difference():
    vv = np.random.default_rng(1).normal(size=(4, 3, 3)).astype(np.float32)
    out = gd.stack_seasonal_channels(vv, vv.copy())
    np.testing.assert_array_equal(out[2::3], np.zeros((4, 3, 3), dtype=np.float32))


def test_stack_shape_mismatch():
    with pytest.raises(DataError):
        gd.stack_seasonal_channels(np.zeros((4, 2, 2)), np.zeros((3, 2, 2)))


def test_speckle_unit_mean_intensity(rng):
    db = gd.speckle_db(rng, (200, 200), looks=4)
    intensity = 10.0 ** (db / 10.0)
    assert abs(intensity.mean() - 1.0) < 0.01


def test_more_looks_less_speckle(rng):
    rough = gd.speckle_db(rng, (100, 100), looks=1).std()
    smooth = gd.speckle_db(rng, (100, 100), looks=16).std()
    assert smooth < 0.5 * rough


# ---------------------------------------------------------------------------
# tiles

def test_tile_shapes_and_types():
    tile = gd.synthesize_tile(small_cfg(), 0)
    assert tile.channels.shape == (12, 16, 16)
    assert tile.channels.dtype == np.float32
    assert tile.labels.shape == (16, 16)
    assert tile.labels.dtype == np.uint8
    assert tile.labels.max() < gd.NUM_CLASSES
    assert len(tile.channel_names) == 12
    assert tile.width == tile.height == 16


def test_labels_are_spatially_coherent():
    tile = gd.synthesize_tile(small_cfg(tile_size=64), 1)
    lab = tile.labels
    agree = (lab[:, 1:] == lab[:, :-1]).mean()
    assert agree > 0.85, f"labels look like noise: row agreement {agree:.2f}"


def test_channels_follow_class_signatures():
    """Per-class mean backscatter should sit near the class signature, which
    is what makes the labels learnable from the channels."""
    cfg = small_cfg(tile_size=64, texture_db=0.0)
    tile = gd.synthesize_tile(cfg, 2)
    vv0 = tile.channels[0]
    for k in np.unique(tile.labels):
        mask = tile.labels == k
        if mask.sum() < 50:
            continue
        observed = vv0[mask].mean()
        # gamma speckle in dB has mean about -0.57 dB at 4 looks
        assert abs(observed - gd.CLASS_VV_DB[k, 0]) < 1.5


def test_noise_free_single_class_limit():
    """With speckle off, texture off, and one class, every channel plane is
    exactly the class signature value."""
    cfg = small_cfg(num_classes=1, speckle_looks=None, texture_db=0.0)
    tile = gd.synthesize_tile(cfg, 0)
    assert (tile.labels == 0).all()
    for s in range(4):
        np.testing.assert_array_equal(tile.channels[3 * s],
                                      np.full((16, 16), gd.CLASS_VV_DB[0, s]))
        np.testing.assert_array_equal(tile.channels[3 * s + 1],
                                      np.full((16, 16), gd.CLASS_VH_DB[0, s]))


def test_synthesis_is_deterministic():
    a = gd.synthesize_tile(small_cfg(), 4)
    b = gd.synthesize_tile(small_cfg(), 4)
    np.testing.assert_array_equal(a.channels, b.channels)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_dataset_prefix_is_nested():
    big = gd.synthesize_dataset(small_cfg(num_tiles=8))
    small = gd.synthesize_dataset(small_cfg(num_tiles=3))
    for t_small, t_big in zip(small, big):
        np.testing.assert_array_equal(t_small.channels, t_big.channels)


def test_all_classes_appear_across_dataset():
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=100, tile_size=24))
    seen = np.zeros(gd.NUM_CLASSES, dtype=np.int64)
    for t in tiles:
        seen += np.bincount(t.labels.ravel(), minlength=gd.NUM_CLASSES)
    assert (seen > 0).all(), f"class histogram {seen.tolist()}"


def test_tile_label_validation():
    with pytest.raises(DataError):
        gd.RasterTile(np.zeros((1, 2, 2)), labels=np.full((2, 2), gd.NUM_CLASSES))
    with pytest.raises(DataError):
        gd.RasterTile(np.zeros((1, 2, 2)), labels=np.zeros((3, 3)))
    with pytest.raises(DataError):
        gd.RasterTile(np.zeros((2, 2, 2)), channel_names=("only_one",))


# ---------------------------------------------------------------------------
# splits

def test_split_exact_fractions_at_1000():
    tiles = [gd.synthesize_tile(small_cfg(tile_size=4), i) for i in range(1000)]
    split = gd.geographic_band_split(tiles)
    assert split.counts() == (600, 200, 200)


def test_split_matches_per_tile_band_oracle():
    tiles = [gd.synthesize_tile(small_cfg(tile_size=4), i) for i in range(137)]
    split = gd.geographic_band_split(tiles)
    expect = {"train": [], "val": [], "test": []}
    for i, tile in enumerate(tiles):
        band = int(np.floor((tile.lat + 90.0) / 1.0)) % 5
        expect[("train", "train", "train", "val", "test")[band]].append(i)
    assert split.train == expect["train"]
    assert split.val == expect["val"]
    assert split.test == expect["test"]


def test_split_band_purity():
    tiles = [gd.synthesize_tile(small_cfg(tile_size=4), i) for i in range(300)]
    split = gd.geographic_band_split(tiles)
    bands = lambda idxs: {gd.latitude_band(tiles[i].lat) for i in idxs}
    assert not bands(split.train) & bands(split.val)
    assert not bands(split.train) & bands(split.test)
    assert not bands(split.val) & bands(split.test)


def test_split_is_order_independent():
    tiles = [gd.synthesize_tile(small_cfg(tile_size=4), i) for i in range(60)]
    split = gd.geographic_band_split(tiles)
    perm = np.random.default_rng(9).permutation(len(tiles))
    shuffled = gd.geographic_band_split([tiles[i] for i in perm])
    # membership must follow the tile, not its position
    orig = {i: name for name, idxs in
            (("train", split.train), ("val", split.val), ("test", split.test))
            for i in idxs}
    back = {int(perm[j]): name for name, idxs in
            (("train", shuffled.train), ("val", shuffled.val),
             ("test", shuffled.test))
            for j in idxs}
    assert orig == back


def test_split_rejects_degenerate():
    tiles = [gd.RasterTile(np.zeros((1, 4, 4)), lat=10.2) for _ in range(10)]
    with pytest.raises(DataError):
        gd.geographic_band_split(tiles)


def test_split_rejects_bad_fractions():
    tiles = [gd.synthesize_tile(small_cfg(tile_size=4), i) for i in range(10)]
    with pytest.raises(ConfigError):
        gd.geographic_band_split(tiles, fractions=(0.5, 0.2, 0.2))


# ---------------------------------------------------------------------------
# subsampling

def test_subsample_bounds():
    with pytest.raises(ConfigError):
        gd.subsample_fraction([1, 2, 3], 0.0, seed=0)
    with pytest.raises(ConfigError):
        gd.subsample_fraction([1, 2, 3], 1.2, seed=0)
    with pytest.raises(DataError):
        gd.subsample_fraction([], 0.5, seed=0)


def test_subsample_keeps_at_least_one():
    assert len(gd.subsample_fraction(list(range(5)), 0.01, seed=1)) == 1


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6),
       f1=st.floats(0.05, 1.0), f2=st.floats(0.05, 1.0))
def test_subsample_nested(seed, f1, f2):
    lo, hi = sorted([f1, f2])
    items = list(range(40))
    small = gd.subsample_fraction(items, lo, seed)
    big = gd.subsample_fraction(items, hi, seed)
    assert set(small) <= set(big)
    assert len(big) == max(1, int(round(hi * 40)))


# ---------------------------------------------------------------------------
# normalization

def test_normalization_matches_numpy_oracle():
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=4))
    mean, std = gd.compute_normalization(tiles)
    stacked = np.concatenate([t.channels.reshape(12, -1) for t in tiles], axis=1)
    np.testing.assert_allclose(mean, stacked.mean(axis=1), rtol=1e-4)
    np.testing.assert_allclose(std, stacked.std(axis=1), rtol=1e-3)


def test_normalize_channels_standardizes():
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=4))
    mean, std = gd.compute_normalization(tiles)
    normed = np.concatenate(
        [gd.normalize_channels(t.channels, mean, std).reshape(12, -1) for t in tiles],
        axis=1)
    np.testing.assert_allclose(normed.mean(axis=1), 0.0, atol=1e-3)
    np.testing.assert_allclose(normed.std(axis=1), 1.0, atol=1e-3)


def test_zero_variance_channel_warns_and_uses_std_one():
    # VV == VH makes every third channel identically zero
    vv = np.random.default_rng(0).normal(size=(4, 8, 8)).astype(np.float32)
    tiles = [gd.RasterTile(gd.stack_seasonal_channels(vv + i, vv + i))
             for i in range(2)]
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        mean, std = gd.compute_normalization(tiles)
    np.testing.assert_array_equal(std[2::3], np.ones(4, dtype=np.float32))
    normed = gd.normalize_channels(tiles[0].channels, mean, std)
    np.testing.assert_array_equal(normed[2::3], np.zeros((4, 8, 8), dtype=np.float32))


def test_normalization_needs_two_tiles():
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=1))
    with pytest.raises(DataError):
        gd.compute_normalization(tiles)


# ---------------------------------------------------------------------------
# SRT1 tile format

def test_srt1_round_trip(tmp_path):
    tile = gd.synthesize_tile(small_cfg(), 0)
    path = tmp_path / "tile.srt1"
    gd.save_tile(path, tile)
    loaded = gd.load_tile(path)
    assert loaded.lat == tile.lat and loaded.lon == tile.lon
    assert loaded.channel_names == tile.channel_names
    np.testing.assert_array_equal(loaded.channels, tile.channels)
    np.testing.assert_array_equal(loaded.labels, tile.labels)


def test_srt1_round_trip_without_labels(tmp_path):
    tile = gd.RasterTile(np.ones((3, 8, 8), dtype=np.float32), lon=44.0,
                         lat=-12.5, channel_names=("a", "b", "c"))
    path = tmp_path / "nolabels.srt1"
    gd.save_tile(path, tile)
    loaded = gd.load_tile(path)
    assert loaded.labels is None
    assert loaded.channel_names == ("a", "b", "c")
    np.testing.assert_array_equal(loaded.channels, tile.channels)


def test_srt1_write_is_byte_stable(tmp_path):
    tile = gd.synthesize_tile(small_cfg(), 1)
    p1, p2 = tmp_path / "a.srt1", tmp_path / "b.srt1"
    gd.save_tile(p1, tile)
    gd.save_tile(p2, tile)
    assert p1.read_bytes() == p2.read_bytes()


def test_srt1_bad_magic(tmp_path):
    path = tmp_path / "bad.srt1"
    path.write_bytes(b"NOTATILE" + b"\x00" * 32)
    with pytest.raises(FormatError) as exc:
        gd.load_tile(path)
    assert exc.value.offset == 0


def test_srt1_truncation_reports_offset(tmp_path):
    tile = gd.synthesize_tile(small_cfg(), 0)
    path = tmp_path / "tile.srt1"
    gd.save_tile(path, tile)
    blob = path.read_bytes()
    cut = path.with_suffix(".cut")
    cut.write_bytes(blob[: len(blob) - 7])
    with pytest.raises(FormatError) as exc:
        gd.load_tile(cut)
    assert exc.value.offset is not None


def test_srt1_trailing_bytes_rejected(tmp_path):
    tile = gd.synthesize_tile(small_cfg(), 0)
    path = tmp_path / "tile.srt1"
    gd.save_tile(path, tile)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        gd.load_tile(path)


def test_srt1_unsupported_version(tmp_path):
    blob = struct.pack("<8sHHIIddB", b"SARTILE1", 9, 0, 0, 0, 0.0, 0.0, 0)
    path = tmp_path / "v9.srt1"
    path.write_bytes(blob + struct.pack("<H", 0))
    with pytest.raises(FormatError, match="version"):
        gd.load_tile(path)


# ---------------------------------------------------------------------------
# dataset directories

def test_dataset_directory_round_trip(tmp_path):
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=4))
    gd.save_dataset(tmp_path / "d", tiles)
    assert (tmp_path / "d" / "manifest.csv").exists()
    loaded = gd.load_dataset(tmp_path / "d")
    assert len(loaded) == 4
    for a, b in zip(tiles, loaded):
        assert a.lat == b.lat and a.lon == b.lon
        np.testing.assert_array_equal(a.channels, b.channels)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_dataset_directory_is_byte_stable(tmp_path):
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=3))
    gd.save_dataset(tmp_path / "a", tiles)
    gd.save_dataset(tmp_path / "b", tiles)
    a_files = sorted(p.name for p in (tmp_path / "a").iterdir())
    b_files = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert a_files == b_files
    for name in a_files:
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes()


def test_manifest_records_unassigned_split(tmp_path):
    tiles = gd.synthesize_dataset(small_cfg(num_tiles=2))
    gd.save_dataset(tmp_path, tiles)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "id,file,lon,lat,split"
    assert all(line.endswith(",unassigned") for line in lines[1:])


def test_load_dataset_empty_dir(tmp_path):
    with pytest.raises(DataError):
        gd.load_dataset(tmp_path)
