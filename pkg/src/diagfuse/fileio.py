"""On-disk formats: TNS1 tensors and binary PGM masks.

TNS1 is the package's float tensor dump: an ASCII header
``TNS1\\n<ndim>\\n<d0> <d1> ...\\n`` followed by the row-major payload as
little-endian 64-bit floats.  Model weights, images, and full-precision
fused ground-truths all use it.

Masks travel as 8-bit binary PGM (P5, maxval 255, foreground = 255);
soft maps are quantized to 8 bits when written as PGM, so every PGM has
a full-precision TNS1 sibling wherever precision matters.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError

_TNS_MAGIC = b"TNS1"


def save_tns(path: str | os.PathLike, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype=np.float64, order="C")
    dims = " ".join(str(d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(_TNS_MAGIC + b"\n")
        fh.write(f"{arr.ndim}\n".encode("ascii"))
        fh.write(f"{dims}\n".encode("ascii"))
        fh.write(arr.astype("<f8").tobytes())


def load_tns(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != _TNS_MAGIC:
            raise DataError(f"{path}: not a TNS1 file (magic {magic!r})")
        try:
            ndim = int(fh.readline())
            dims_line = fh.readline().split()
            dims = tuple(int(d) for d in dims_line)
        except ValueError as exc:
            raise DataError(f"{path}: malformed TNS1 header") from exc
        if len(dims) != ndim or any(d <= 0 for d in dims):
            raise DataError(f"{path}: bad dims {dims} for ndim {ndim}")
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise DataError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write a 2-D map as P5 PGM; values outside [0,1] are clipped."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{path}: PGM wants a 2-D array, got shape {arr.shape}")
    pixels = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 PGM back to float64 in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    # header = 4 whitespace-separated tokens, '#' comments allowed
    while len(fields) < 4 and pos < len(data):
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if len(fields) != 4 or fields[0] != b"P5":
        raise DataError(f"{path}: not a P5 PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w) / 255.0


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a PGM as a binary uint8 mask (threshold 0.5)."""
    return (load_pgm(path) > 0.5).astype(np.uint8)
