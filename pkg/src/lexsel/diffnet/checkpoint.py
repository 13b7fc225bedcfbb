"""Checkpoint file format.

Layout: 8-byte magic b"LEXCKPT1", uint64 little-endian JSON index length,
the UTF-8 JSON index, then the raw little-endian parameter payload. The
index records name, shape, dtype and byte offset for every entry, plus a
free-form meta dict. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LEXCKPT1"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, named_arrays: dict, meta: dict | None = None):
    """Write {name: ndarray} to path. Names with dots are fine, so a
    multi-network snapshot can use 'predictor.w0' style keys."""
    entries = []
    payload = bytearray()
    for name, arr in named_arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            dt = "float32"
        elif arr.dtype == np.float64:
            dt = "float64"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(_DTYPES[dt]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dt, "offset": len(payload),
                        "nbytes": len(raw)})
        payload.extend(raw)
    index = {"version": 1, "meta": meta or {}, "entries": entries}
    blob = json.dumps(index).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Read a checkpoint; returns ({name: ndarray}, meta)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        index = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for ent in index["entries"]:
        raw = payload[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]])
        arrays[ent["name"]] = arr.reshape(ent["shape"]).astype(
            ent["dtype"], copy=True)
    return arrays, index.get("meta", {})


def split_prefixed(arrays: dict) -> dict:
    """Group 'net.param' keys into {net: {param: array}}."""
    out: dict = {}
    for key, arr in arrays.items():
        if "." not in key:
            raise CheckpointError(f"expected prefixed key, got {key!r}")
        net, name = key.split(".", 1)
        out.setdefault(net, {})[name] = arr
    return out
