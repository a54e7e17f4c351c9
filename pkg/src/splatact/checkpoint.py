"""Self-describing binary container for named float64 arrays.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header, then the raw little-endian float64 payloads back to back.  The header
carries a format version, free-form metadata, and for every entry its shape
and byte offset, so files can be read without the producing code.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"SPLATCK1"
FORMAT_VERSION = 1


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        # note: ascontiguousarray would promote 0-d arrays to 1-d, losing shape
        a = np.asarray(arr, dtype="<f8", order="C")
        entries[name] = {"shape": list(a.shape), "offset": offset}
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "entries": entries,
    }
    hj = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint64(len(hj)).tobytes())
        f.write(hj)
        for blob in blobs:
            f.write(blob)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    raw = p.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{p}: not a parameter container (bad magic)")
    hlen = int(np.frombuffer(raw[8:16], dtype="<u8")[0])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{p}: unsupported container version {header.get('format_version')}"
        )
    base = 16 + hlen
    arrays = {}
    for name, ent in header["entries"].items():
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + ent["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[name] = arr.reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})
