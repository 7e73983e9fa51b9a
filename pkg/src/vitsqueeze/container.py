"""Binary tensor container: JSON header followed by little-endian float64 payloads.

Layout::

    magic      8 bytes   b"VSQZTNS1"
    hlen       8 bytes   little-endian uint64, length of the header block
    header     hlen      UTF-8 JSON, space-padded so the payload is 8-byte aligned
    payload              tensors back to back, each at an 8-byte aligned offset

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "offset"}]}``
with offsets relative to the start of the payload.  Output is byte-for-byte
deterministic for equal inputs.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"VSQZTNS1"
_ALIGN = 8


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def encode(tensors: dict, meta: dict | None = None) -> bytes:
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    header = json.dumps({"meta": meta or {}, "tensors": directory}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    header += b" " * _pad(len(MAGIC) + 8 + len(header))
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode(blob: bytes, source: str = "<bytes>"):
    if blob[:8] != MAGIC or len(blob) < 16:
        raise ConfigError(f"{source}: not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{source}: corrupt header ({exc})") from None
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = math.prod(shape)
        start = base + entry["offset"]
        if start + 8 * count > len(blob):
            raise ConfigError(f"{source}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
    return tensors, header["meta"]


def save(path, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(tensors, meta))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def load(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    return decode(blob, str(path))
