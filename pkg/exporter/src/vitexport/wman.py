"""Standalone WMAN v1 writer.

Kept independent of the consuming package on purpose: the manifest format
is the interface, so the consumer's loader validating these bytes is a
cross-implementation check of the format itself. Layout: 8-byte magic
``WMAN0001``, little-endian uint32 JSON length, sorted-key UTF-8 JSON
index, zero padding to the next 64-byte boundary, then the tensor blob
(row-major little-endian float32, offsets 64-byte aligned and ascending).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"WMAN0001"
ALIGN = 64


class ExportError(Exception):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_manifest(path, named, model=None, norm=None, extra=None) -> None:
    """``named`` is an ordered mapping of tensor name -> numpy array."""
    arrays = []
    for name, arr in named.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        if not np.isfinite(arr).all():
            raise ExportError(f"tensor {name!r} contains non-finite values")
        arrays.append((name, arr))

    entries = []
    offset = 0
    for name, arr in arrays:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset = _align(offset + arr.nbytes)
    index = {
        "format": "WMAN",
        "version": 1,
        "model": model,
        "norm": norm,
        "tensors": entries,
        "extra": extra or {},
    }
    header = json.dumps(index, sort_keys=True).encode("utf-8")
    blob_start = _align(len(MAGIC) + 4 + len(header))
    total = blob_start + (entries[-1]["offset"] + arrays[-1][1].nbytes
                          if arrays else 0)
    out = bytearray(total)
    out[:8] = MAGIC
    out[8:12] = struct.pack("<I", len(header))
    out[12:12 + len(header)] = header
    for entry, (_, arr) in zip(entries, arrays):
        start = blob_start + entry["offset"]
        out[start:start + arr.nbytes] = arr.tobytes()

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(out))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
