"""Single-file model checkpoints.

Layout (all integers little-endian)::

    bytes 0..8    magic  b"SKYCKPT\\n"
    bytes 8..16   uint64 header length H
    next H bytes  UTF-8 JSON header:
                  {"format": "skywatch-checkpoint", "version": 1,
                   "arch": {...}, "meta": {...},
                   "tensors": [{"name", "shape", "offset", "count"}, ...]}
    remainder     float64 little-endian data, tensors concatenated in
                  header order; ``offset`` / ``count`` are in elements.

The JSON is written with sorted keys, so identical models give identical
files.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError, DataError

MAGIC = b"SKYCKPT\n"
FORMAT = "skywatch-checkpoint"
VERSION = 1


def save_checkpoint(path, arch: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"format": FORMAT, "version": VERSION, "arch": arch,
                         "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    write_bytes_atomic(path, payload)
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Return ``(arch, tensors, meta)`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path} is not a skywatch checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint format {header.get('format')} v{header.get('version')}")
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        chunk = data[e["offset"]:e["offset"] + e["count"]]
        tensors[e["name"]] = chunk.reshape(e["shape"]).astype(np.float64)
    return header["arch"], tensors, header["meta"]


def write_bytes_atomic(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
