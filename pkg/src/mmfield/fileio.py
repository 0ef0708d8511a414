"""Binary image / plane / JSON helpers shared across the package.

All float blobs on disk are little-endian float32. PPM/PGM previews are
8-bit binary (P6/P5).
"""

import json
import os

import numpy as np


def write_ppm(path, image):
    """Write an (H, W, 3) float array in [0, 1] as a binary 8-bit PPM."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    u8 = np.round(arr * 255.0).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def read_ppm(path):
    """Read a binary 8-bit PPM back into an (H, W, 3) float array in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    # header = magic, width, height, maxval separated by whitespace
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"unsupported PPM variant {magic!r} maxval={maxval}")
    u8 = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return u8.reshape(h, w, 3).astype(np.float32) / 255.0


def write_pgm(path, image):
    """Write an (H, W) float array in [0, 1] as a binary 8-bit PGM."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {arr.shape}")
    u8 = np.round(arr * 255.0).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def write_f32(path, arr):
    """Write an array as a raw little-endian float32 blob."""
    np.asarray(arr, dtype="<f4").tofile(path)


def read_f32(path, shape=None):
    """Read a raw little-endian float32 blob, optionally reshaped."""
    arr = np.fromfile(path, dtype="<f4")
    if shape is not None:
        arr = arr.reshape(shape)
    return arr


def dump_json(path, obj):
    """Write JSON with sorted keys so identical state gives identical bytes."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def canonical_json_bytes(obj):
    """Compact canonical JSON encoding (sorted keys, no whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
