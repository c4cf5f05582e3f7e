"""Flat binary checkpoint container.

Layout::

    b"LMKCKPT1"                 8-byte magic
    <u8 little-endian>          header length in bytes
    header                      UTF-8 JSON: {"meta": {...}, "tensors": [{name, shape, dtype, offset, nbytes}]}
    payload                     concatenated little-endian tensor bytes

Optimizer state is stored next to the parameters under the ``opt/`` prefix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LMKCKPT1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        kind = str(arr.dtype)
        if kind not in _DTYPES:
            arr = arr.astype(np.float64)
            kind = "float64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
        out[e["name"]] = arr
    return out, header["meta"]
