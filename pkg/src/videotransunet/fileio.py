"""Small file formats: binary PGM (P5) images and UTF-8 key=value files."""

from __future__ import annotations

import os
import re

import numpy as np


class FormatError(ValueError):
    pass


def write_pgm(path, image) -> None:
    """Write an 8-bit greyscale image (values clipped to 0..255)."""
    img = np.clip(np.asarray(image), 0, 255).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_mask_pgm(path, mask) -> None:
    write_pgm(path, np.where(np.asarray(mask) > 0, 255, 0))


_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = blob[m.end() :]
    if len(data) < w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=w * h).reshape(h, w)


def read_mask_pgm(path) -> np.ndarray:
    return (read_pgm(path) > 127).astype(np.float32)


def read_keyvalue(path) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise FormatError(f"{path}:{lineno}: empty key")
            if key in out:
                raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def write_keyvalue(path, items: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in items.items():
            fh.write(f"{key}={value}\n")
    os.replace(tmp, path)
