"""Single-file binary checkpoints: versioned header, JSON manifest, raw records.

Layout (all integers little-endian):

    magic  b"EFCK"
    u16    format version (1)
    u32    manifest length, then manifest JSON (utf-8)
    u32    record count
    per record:
        u16 name length, name (utf-8)
        u8  dtype string length, numpy dtype string (e.g. "<f4")
        u8  ndim, then ndim * u64 dims
        u64 payload byte count, then raw C-order array bytes
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def _le_dtype(dtype: np.dtype) -> str:
    s = dtype.newbyteorder("<").str
    return s


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write named arrays plus a JSON manifest to one binary file."""
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, order="C")
            dts = _le_dtype(arr.dtype).encode("ascii")
            nm = name.encode("utf-8")
            f.write(struct.pack("<H", len(nm)))
            f.write(nm)
            f.write(struct.pack("<B", len(dts)))
            f.write(dts)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, manifest). Values are native-endian contiguous arrays."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 6
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = json.loads(raw[off : off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (dlen,) = struct.unpack_from("<B", raw, off)
        off += 1
        dts = raw[off : off + dlen].decode("ascii")
        off += dlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, off)
        off += 8
        arr = np.frombuffer(raw, dtype=np.dtype(dts), count=nbytes // np.dtype(dts).itemsize, offset=off)
        off += nbytes
        # frombuffer views are read-only; copy into a writable native-endian array
        arrays[name] = np.array(arr.reshape(shape), dtype=np.dtype(dts).newbyteorder("="))
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, manifest
