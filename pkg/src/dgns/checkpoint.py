"""Single-file binary checkpoint container.

Layout: 8-byte magic ``DGNSCKPT``, little-endian uint64 header length, a
UTF-8 JSON header, then the raw array bytes. The header carries an index
``{name: {shape, offset, dtype}}`` (offsets relative to the data section,
dtype tag always ``"f64"``) plus an arbitrary ``meta`` dict.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

_MAGIC = b"DGNSCKPT"


def save_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Atomic write (temp file + rename) of named float64 arrays."""
    index = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        index[name] = {"shape": list(a.shape), "offset": offset, "dtype": "f64"}
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"index": index, "meta": meta or {}}).encode("utf-8")

    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    arrays = {}
    for name, entry in header["index"].items():
        if entry["dtype"] != "f64":
            raise ValueError(f"{path}: unsupported dtype tag {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=start)
        arrays[name] = arr.reshape(shape).copy()
    return arrays, header.get("meta", {})
