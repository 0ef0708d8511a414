"""Checkpoint container format.

Layout: 4-byte magic, u32 little-endian header length, canonical JSON
header, then raw little-endian float32 blobs back to back. The header's
"blobs" entry records each blob's element offset and length within the
blob region. Writing the same state twice yields identical bytes.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError
from .fileio import canonical_json_bytes

MAGIC = b"MMF1"


def save_state(path, header, blobs):
    """Write header (JSON-able dict) + named float32 blobs.

    ``blobs`` is a dict name -> 1-D numpy array; offsets are assigned in
    sorted-name order and recorded in the header.
    """
    header = dict(header)
    table = {}
    offset = 0
    ordered = []
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4").reshape(-1)
        table[name] = {"offset": offset, "length": int(arr.size)}
        ordered.append(arr)
        offset += arr.size
    header["blobs"] = table
    hbytes = canonical_json_bytes(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hbytes).to_bytes(4, "little"))
        f.write(hbytes)
        for arr in ordered:
            f.write(arr.tobytes())


def load_state(path):
    """Inverse of save_state; returns (header dict, blobs dict)."""
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r}")
            hlen = int.from_bytes(f.read(4), "little")
            try:
                header = json.loads(f.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise CheckpointError(f"{path}: corrupt header ({e})") from e
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    blobs = {}
    total = len(data) // 4
    for name, entry in header.get("blobs", {}).items():
        off, length = entry["offset"], entry["length"]
        if off + length > total:
            raise CheckpointError(f"{path}: blob {name!r} overruns file")
        blobs[name] = np.frombuffer(data, dtype="<f4", count=length, offset=off * 4).copy()
    return header, blobs


def extract_segment(header, params_blob, name):
    """Pull one named parameter segment out of the flat params blob."""
    for seg in header.get("segments", []):
        if seg["name"] == name:
            off = seg["offset"]
            shape = tuple(seg["shape"])
            n = int(np.prod(shape)) if shape else 1
            return params_blob[off : off + n].reshape(shape)
    raise CheckpointError(f"checkpoint has no segment {name!r}")
