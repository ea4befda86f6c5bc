"""Bit-exact, dependency-free image and array I/O.

Images and masks travel as binary 8-bit PGM (P5) / PPM (P6); logits can be
dumped raw as little-endian float64 behind a one-line ASCII header
``mixerlab-f64 <ndim> <dim0> <dim1> ...``.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_pnm_header(data: bytes, magic: bytes):
    if not data.startswith(magic):
        raise DataError(f"expected {magic.decode()} file")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"only 8-bit PNM supported, got maxval {maxval}")
    return width, height, pos


def write_pgm(path: str, image: np.ndarray):
    """Write a (H, W) uint8 array as binary PGM."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DataError("PGM wants a 2D array")
    arr = arr.astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + arr.tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _read_pnm_header(data, b"P5")
    body = data[pos : pos + width * height]
    if len(body) != width * height:
        raise DataError(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_ppm(path: str, image: np.ndarray):
    """Write a (3, H, W) uint8 array as binary PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError("PPM wants a (3, H, W) array")
    arr = arr.astype(np.uint8)
    header = f"P6\n{arr.shape[2]} {arr.shape[1]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + arr.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _read_pnm_header(data, b"P6")
    body = data[pos : pos + 3 * width * height]
    if len(body) != 3 * width * height:
        raise DataError(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1).copy()


def read_image_as_float(path: str) -> np.ndarray:
    """Load PGM or PPM into a (3, H, W) float array scaled to [0, 1];
    grayscale is replicated across the three channels."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P5":
        gray = read_pgm(path).astype(np.float64) / 255.0
        return np.repeat(gray[None], 3, axis=0)
    if magic == b"P6":
        return read_ppm(path).astype(np.float64) / 255.0
    raise DataError(f"{path}: unsupported image format {magic!r} (PGM/PPM only)")


def write_raw_f64(path: str, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    header = "mixerlab-f64 " + " ".join([str(arr.ndim)] + [str(d) for d in arr.shape]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def read_raw_f64(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        parts = header.split()
        if not parts or parts[0] != "mixerlab-f64":
            raise DataError(f"{path}: not a mixerlab raw float dump")
        ndim = int(parts[1])
        shape = tuple(int(v) for v in parts[2 : 2 + ndim])
        body = fh.read()
    n = int(np.prod(shape)) if shape else 1
    if len(body) != 8 * n:
        raise DataError(f"{path}: truncated raw float dump")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(shape)
