"""Binary parameter checkpoints.

Layout (little-endian)::

    b"SQACKPT\\0"   magic
    uint32         format version
    uint32         header length in bytes
    header         UTF-8 JSON: config, config_hash, step, tensors[name, kind, shape]
    payload        row-major float32 tensors in header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

MAGIC = b"SQACKPT\0"
VERSION = 1


def save_checkpoint(path, config: dict, config_hash: str, step: int, params: dict, buffers: dict):
    tensors, blobs = [], []
    for kind, group in (("param", params), ("buffer", buffers)):
        for name in sorted(group):
            arr = np.asarray(group[name], dtype="<f4", order="C")
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    header = json.dumps({"config": config, "config_hash": config_hash, "step": int(step),
                         "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, dtype=np.float32):
    """Return ``(header, params, buffers)``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError(f"{path} is not a checkpoint")
    if len(data) < 16:
        raise ParseError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as exc:
        raise ParseError(f"{path}: unreadable header ({exc})") from exc
    pos = 16 + hlen
    params, buffers = {}, {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        if pos + 4 * n > len(data):
            raise ParseError(f"{path}: payload truncated at tensor {t['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(t["shape"])
        pos += 4 * n
        (params if t["kind"] == "param" else buffers)[t["name"]] = arr.astype(dtype)
    if pos != len(data):
        raise ParseError("checkpoint payload length does not match its header")
    return header, params, buffers
