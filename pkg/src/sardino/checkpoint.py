"""SDCK checkpoint container: named tensors plus string metadata,
integrity-checked with a trailing CRC32.

layout (little-endian):
  magic    4s  "SDCK"
  version  u16 currently 1
  flags    u16 reserved, zero
  meta count u32, then per entry: key u16-len + bytes, value u32-len + bytes
  tensor count u32, then per tensor:
    name u16-len + bytes, dtype code u8, ndim u8, dims u32 each, raw payload
  crc32    u32 over everything before it
"""

from __future__ import annotations

import struct
import zlib
from typing import Mapping

import numpy as np

from .errors import FormatError

_MAGIC = b"SDCK"
_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1,
                np.dtype("uint8"): 2, np.dtype("<i8"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_str(s: str, lenfmt: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(lenfmt, len(raw)) + raw


def save_checkpoint(path, tensors: Mapping[str, np.ndarray],
                    meta: Mapping[str, str]):
    chunks = [struct.pack("<4sHH", _MAGIC, _VERSION, 0)]
    chunks.append(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        chunks.append(_pack_str(key, "<H"))
        chunks.append(_pack_str(str(meta[key]), "<I"))
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        chunks.append(_pack_str(name, "<H"))
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}",
                              offset=self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError("file too short to be a checkpoint", offset=0)
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(f"checksum mismatch: stored {stored:#010x}, "
                          f"computed {actual:#010x}", offset=len(data) - 4)
    cur = _Cursor(data[:-4])
    magic, version, _flags = cur.unpack("<4sHH", "header")
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)

    meta = {}
    (n_meta,) = cur.unpack("<I", "meta count")
    for _ in range(n_meta):
        (klen,) = cur.unpack("<H", "meta key length")
        key = cur.take(klen, "meta key").decode("utf-8")
        (vlen,) = cur.unpack("<I", "meta value length")
        meta[key] = cur.take(vlen, "meta value").decode("utf-8")

    tensors = {}
    (n_tensors,) = cur.unpack("<I", "tensor count")
    for _ in range(n_tensors):
        (nlen,) = cur.unpack("<H", "tensor name length")
        name = cur.take(nlen, "tensor name").decode("utf-8")
        code, ndim = cur.unpack("<BB", f"tensor {name} header")
        if code not in _CODE_DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}",
                              offset=cur.pos - 2)
        shape = cur.unpack(f"<{ndim}I", f"tensor {name} dims")
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = cur.take(nbytes, f"tensor {name} payload")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if cur.pos != len(cur.data):
        raise FormatError(f"{len(cur.data) - cur.pos} trailing bytes",
                          offset=cur.pos)
    return tensors, meta
