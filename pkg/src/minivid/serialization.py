"""Binary formats: parameter checkpoints and raw per-clip tensor files.

Checkpoint: a flat archive of dotted parameter names to float64 payloads.
Layout (all integers little-endian):

    magic  b"MVCKPT"  | u16 version
    u32 entry count
    per entry: u16 name length | utf-8 name | u8 ndim | u32 dims... |
               float64 little-endian payload

Values are stored as float64 regardless of compute dtype; float32
parameters round-trip bit-exactly through the widening.

Clip tensor file: magic b"MVTEN" | u16 version | u8 dtype code (4 or 8
bytes per element) | u8 ndim | u32 dims... | little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"MVCKPT"
CKPT_VERSION = 1
TEN_MAGIC = b"MVTEN"
TEN_VERSION = 1

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def save_checkpoint(path, params: dict) -> None:
    """Write {dotted_name: array-like} to a checkpoint archive."""
    items = list(params.items())
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), struct.pack("<I", len(items))]
    for name, value in items:
        arr = np.ascontiguousarray(np.asarray(getattr(value, "data", value), dtype="<f8"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read a checkpoint archive back to {name: float64 ndarray}."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<H", view, off)
    off += 2
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off:off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        if name in out:
            raise FormatError(f"{path}: duplicate parameter name {name!r}")
        out[name] = arr.copy()
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def write_array(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        code, cast = 4, arr.astype("<f4", copy=False)
    else:
        code, cast = 8, arr.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(TEN_MAGIC)
        fh.write(struct.pack("<HBB", TEN_VERSION, code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(cast.tobytes())


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(TEN_MAGIC)] != TEN_MAGIC:
        raise FormatError(f"{path}: not a tensor file (bad magic)")
    off = len(TEN_MAGIC)
    version, code, ndim = struct.unpack_from("<HBB", raw, off)
    off += 4
    if version != TEN_VERSION:
        raise FormatError(f"{path}: unsupported tensor file version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    return np.frombuffer(raw, dtype=_DTYPE_CODES[code], count=n, offset=off).reshape(shape).copy()
