"""Versioned binary container for named tensors plus a JSON header.

Layout (all integers little-endian)::

    magic    8 bytes  b"CVCKPT\\x00\\x01"
    version  uint32
    hlen     uint64   length of the JSON header
    header   hlen bytes, UTF-8 JSON with sorted keys
    payload  concatenated raw tensor bytes
    crc32    uint32   over header + payload

The header lists every tensor's name, dtype, shape and byte offset, and
carries free-form ``meta`` (config echo, training counters, ...).  Writing the
same content twice gives identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"CVCKPT\x00\x01"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "bool": "|b1", "uint8": "|u1"}


def _as_numpy(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value)


def dumps(tensors: dict, meta: dict) -> bytes:
    index, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = _as_numpy(value)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {key} for tensor {name}")
        raw = arr.astype(_DTYPES[key]).tobytes()
        index.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": index, "meta": meta}, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(chunks)
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + payload + struct.pack("<I", crc)


def loads(data: bytes):
    """Parse container bytes into (tensors as numpy arrays, meta)."""
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file or truncated header")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC) : fixed])
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if len(data) < fixed + hlen + 4:
        raise CheckpointError("corrupt checkpoint: truncated")
    header = data[fixed : fixed + hlen]
    payload = data[fixed + hlen : -4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(header + payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("corrupt checkpoint: checksum mismatch")
    try:
        head = json.loads(header)
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    tensors = {}
    for entry in head["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"corrupt checkpoint: tensor {entry['name']} out of range")
        arr = np.frombuffer(payload[start:stop], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return tensors, head["meta"]


def write(path, tensors: dict, meta: dict):
    path = Path(path)
    data = dumps(tensors, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
