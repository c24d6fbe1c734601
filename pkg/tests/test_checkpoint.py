"""Checkpoint container tests: bit-exact round trips and corruption checks."""

import numpy as np
import pytest

from sardino import checkpoint as ck
from sardino.errors import FormatError


def sample_tensors(rng):
    return {
        "backbone.blocks.0.attn.qkv.weight": rng.normal(size=(8, 24)).astype(np.float32),
        "center": rng.normal(size=(16,)).astype(np.float64),
        "labels": rng.integers(0, 11, size=(4, 4)).astype(np.uint8),
        "step": np.array([42], dtype=np.int64),
        "scalar": np.array(3.5, dtype=np.float32),
    }


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = sample_tensors(rng)
    meta = {"vit.preset": "desk", "dino.lr": "0.000001", "kind": "pretrain"}
    path = tmp_path / "model.sdck"
    ck.save_checkpoint(path, tensors, meta)
    loaded, loaded_meta = ck.load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype
        np.testing.assert_array_equal(loaded[name], arr)


def test_save_is_byte_stable(tmp_path, rng):
    tensors = sample_tensors(rng)
    p1, p2 = tmp_path / "a.sdck", tmp_path / "b.sdck"
    ck.save_checkpoint(p1, tensors, {"k": "v"})
    ck.save_checkpoint(p2, dict(reversed(list(tensors.items()))), {"k": "v"})
    assert p1.read_bytes() == p2.read_bytes()  # sorted on write


def test_crc_rejects_corruption(tmp_path, rng):
    path = tmp_path / "model.sdck"
    ck.save_checkpoint(path, sample_tensors(rng), {})
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 3] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        ck.load_checkpoint(path)


def test_truncation_detected(tmp_path, rng):
    path = tmp_path / "model.sdck"
    ck.save_checkpoint(path, sample_tensors(rng), {"a": "b"})
    blob = path.read_bytes()
    path.write_bytes(blob[:10])
    with pytest.raises(FormatError):
        ck.load_checkpoint(path)


def test_bad_magic_and_version(tmp_path):
    import struct
    import zlib
    path = tmp_path / "x.sdck"
    body = struct.pack("<4sHH", b"JUNK", 1, 0) + struct.pack("<II", 0, 0)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(FormatError, match="magic"):
        ck.load_checkpoint(path)
    body = struct.pack("<4sHH", b"SDCK", 7, 0) + struct.pack("<II", 0, 0)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(FormatError, match="version"):
        ck.load_checkpoint(path)


def test_empty_checkpoint_round_trips(tmp_path):
    path = tmp_path / "empty.sdck"
    ck.save_checkpoint(path, {}, {})
    tensors, meta = ck.load_checkpoint(path)
    assert tensors == {} and meta == {}


def test_state_dict_round_trip_through_checkpoint(tmp_path):
    """A real model survives save/load with every weight bit intact."""
    from sardino.vit import ViTConfig, VisionTransformer
    model = VisionTransformer(ViTConfig.desk(), np.random.default_rng(2))
    sd = model.state_dict()
    path = tmp_path / "vit.sdck"
    ck.save_checkpoint(path, sd, {"vit.preset": "desk"})
    loaded, _ = ck.load_checkpoint(path)
    fresh = VisionTransformer(ViTConfig.desk(), np.random.default_rng(99))
    fresh.load_state_dict(loaded)
    for k, v in fresh.state_dict().items():
        np.testing.assert_array_equal(v, sd[k])
