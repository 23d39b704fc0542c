"""Flat binary container for named float64 matrices.

Layout: a 4-byte big-endian header length, a UTF-8 JSON header, then the
raw little-endian float64 payload.  The header records name, shape and
byte offset (relative to the payload start) for every entry, so files
can be inspected without reading the payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT = "flipout-checkpoint-v1"


def save_params(path, params):
    """Write a dict of name -> float64 array."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format": FORMAT, "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_params(path):
    """Read back a dict of name -> float64 array."""
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) < 4:
            raise ValueError("truncated checkpoint: missing header length")
        (hlen,) = struct.unpack(">I", raw)
        header = fh.read(hlen)
        if len(header) < hlen:
            raise ValueError("truncated checkpoint: incomplete header")
        meta = json.loads(header.decode("utf-8"))
        if meta.get("format") != FORMAT:
            raise ValueError(f"not a {FORMAT} file")
        payload = fh.read()
    out = {}
    for e in meta["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        end = start + 8 * n
        if end > len(payload):
            raise ValueError("truncated checkpoint: payload too short")
        out[e["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return out
