"""Versioned binary container: JSON header with shapes, then raw little-endian arrays.

Layout::

    b"EBRT" | u32 format version | u64 header length | header JSON | tensor bytes

Writing is deterministic (sorted header keys, no timestamps), so identical
inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"EBRT"
FORMAT_VERSION = 1

_ALLOWED = {"float32", "float64", "int64", "int32", "bool", "uint8"}


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.name
        if dt not in _ALLOWED:
            raise TypeError(f"{name}: unsupported dtype {dt}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16 : 16 + hlen])
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start : start + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"])
        out[e["name"]] = arr.astype(np.dtype(e["dtype"]))
    return out, header["meta"]
