"""Binary container for named tensors: magic, version, JSON header, raw payloads.

Layout (all integers little-endian):

    bytes 0..3    magic b"ADVF"
    bytes 4..7    format version (u32)
    bytes 8..11   header length in bytes (u32)
    ...           UTF-8 JSON header
    ...           tensor payloads, concatenated in header order, C-order bytes

The header carries a ``tensors`` list of ``{name, shape, dtype}`` entries plus
caller-supplied metadata. Float payloads are little-endian 32-bit; integer
payloads little-endian 64-bit. Round-trips are bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADVF"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class ContainerError(RuntimeError):
    """Base error for malformed container files."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.int64:
        return "<i8"
    raise ContainerError(f"unsupported payload dtype {arr.dtype}")


def write_container(path, kind: str, extra: dict, tensors: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _dtype_code(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    header = dict(extra)
    header["kind"] = kind
    header["tensors"] = entries
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, tensors); validates magic, version and payload sizes."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise TruncatedPayloadError(f"{path}: file shorter than fixed header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    hlen = struct.unpack("<I", data[8:12])[0]
    if len(data) < 12 + hlen:
        raise TruncatedPayloadError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header: {e}") from e
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: container kind {header.get('kind')!r}, expected {kind!r}")

    tensors: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for entry in header.get("tensors", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ContainerError(f"{path}: unknown payload dtype {entry['dtype']!r}")
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        end = offset + nbytes
        if end > len(data):
            raise TruncatedPayloadError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(data[offset:end], dtype=dtype).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        offset = end
    if offset != len(data):
        raise ContainerError(f"{path}: {len(data) - offset} trailing bytes after payloads")
    return header, tensors
