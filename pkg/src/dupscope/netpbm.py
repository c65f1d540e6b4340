"""Binary PPM (P6) / PGM (P5) 8-bit image I/O.

Dependency-free and bit-exact: writing the same float image twice yields
identical files. Images are [3,H,W] (PPM) or [H,W] (PGM) floats in [0,1];
quantization is round(255 * v).
"""

from __future__ import annotations

import numpy as np

from .errors import IoError


def _quantize(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise IoError(f"PPM expects [3,H,W], got {img.shape}")
    q = _quantize(img)
    h, w = q.shape[1], q.shape[2]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.moveaxis(q, 0, -1).tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise IoError(f"PGM expects [H,W] or [1,H,W], got {img.shape}")
    q = _quantize(img)
    h, w = q.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _read_header(fh, magic):
    token = fh.read(2)
    if token != magic:
        raise IoError(f"expected {magic!r} header, got {token!r}")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise IoError("truncated netpbm header")
        line = line.split(b"#", 1)[0]
        fields.extend(int(v) for v in line.split())
    w, h, maxval = fields[:3]
    if maxval != 255:
        raise IoError(f"only 8-bit netpbm supported, maxval={maxval}")
    return w, h


def read_ppm(path):
    try:
        with open(path, "rb") as fh:
            w, h = _read_header(fh, b"P6")
            raw = fh.read(3 * w * h)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) != 3 * w * h:
        raise IoError("truncated PPM payload")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return np.moveaxis(data, -1, 0).astype(np.float64) / 255.0


def read_pgm(path):
    try:
        with open(path, "rb") as fh:
            w, h = _read_header(fh, b"P5")
            raw = fh.read(w * h)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(raw) != w * h:
        raise IoError("truncated PGM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
