"""Weight checkpoint file format: JSON header + little-endian f32 flat arrays.

Layout: 8-byte magic, uint32-LE header length, UTF-8 JSON header, raw blob.
The header records config plus (name, shape, offset) per tensor; offsets are
into the blob. Round-trips are bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

MAGIC = b"LPMCKPT1"


def save_checkpoint(
    path: str | Path, config: Mapping[str, Any], tensors: Mapping[str, np.ndarray]
) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes}
        )
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"config": dict(config), "tensors": entries}, separators=(",", ":"), sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    tensors: Dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        a = np.frombuffer(blob[lo:hi], dtype="<f4").reshape(e["shape"]).copy()
        a.setflags(write=False)
        tensors[e["name"]] = a
    return header["config"], tensors
