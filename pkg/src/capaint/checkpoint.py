"""Single-file model checkpoints: magic + JSON header + raw little-endian arrays."""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataIntegrityError

_MAGIC = b"CPNT"


def save_checkpoint(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a checkpoint with embedded JSON header and concatenated arrays."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(le.dtype)})
        blobs.append(le.tobytes())
    header = json.dumps({"kind": kind, "meta": meta, "arrays": entries}).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (kind, meta, {name: array})."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != _MAGIC:
        raise DataIntegrityError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise DataIntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
        kind, meta, entries = header["kind"], header["meta"], header["arrays"]
    except (ValueError, KeyError) as exc:
        raise DataIntegrityError(f"{path}: malformed header: {exc}") from exc

    arrays = {}
    offset = 8 + header_len
    for entry in entries:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        end = offset + nbytes
        if end > len(raw):
            raise DataIntegrityError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype=dtype).reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise DataIntegrityError(f"{path}: {len(raw) - offset} trailing bytes")
    return kind, meta, arrays
