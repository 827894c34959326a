"""Flat tensor checkpoint format.

Layout::

    b"NCPPTNSR"  magic (8 bytes)
    uint32 LE    format version
    uint64 LE    header length in bytes
    header       UTF-8 JSON: {"version", "tensors": [{path, shape, offset, nbytes}], "meta"}
    payload      concatenated little-endian float64 buffers, offsets relative to payload start
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NCPPTNSR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    buffers = []
    offset = 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"path": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = json.dumps({"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an NCPP tensor file")
    if len(raw) < 20:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(raw) < 20 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    payload = memoryview(raw)[20 + hlen:]
    out = {}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {entry['path']}")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64)
        out[entry["path"]] = arr.reshape(entry["shape"])
    return out, header.get("meta", {})
