"""Portable float map (PFM) and 16-bit PGM readers/writers.

PFM files are written little-endian (scale -1.0), single channel,
bottom row first per the format convention. A "stacked" variant simply
concatenates several Pf blocks in one file; readers here accept both.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError


def write_pfm(path, image: np.ndarray) -> None:
    """Write one 2D float array as a little-endian Pf file."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"PFM writer needs a 2D array, got shape {arr.shape}")
    with open(path, "wb") as f:
        _write_block(f, arr)


def write_pfm_stack(path, images) -> None:
    """Write several 2D float arrays as consecutive Pf blocks."""
    with open(path, "wb") as f:
        for image in images:
            arr = np.asarray(image, dtype=np.float32)
            if arr.ndim != 2:
                raise DataError("PFM stack writer needs 2D arrays")
            _write_block(f, arr)


def _write_block(f, arr: np.ndarray) -> None:
    h, w = arr.shape
    f.write(b"Pf\n")
    f.write(f"{w} {h}\n".encode("ascii"))
    f.write(b"-1.0\n")
    f.write(np.flipud(arr).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read the first (usually only) plane of a PFM file."""
    return read_pfm_stack(path)[0]


def read_pfm_stack(path) -> list[np.ndarray]:
    """Read every Pf block in the file."""
    data = Path(path).read_bytes()
    planes = []
    pos = 0
    while pos < len(data):
        header, pos = _read_token(data, pos)
        if header not in (b"Pf", b"PF"):
            raise DataError(f"{path}: bad PFM magic {header!r}")
        if header == b"PF":
            raise DataError(f"{path}: 3-channel PFM not supported here")
        dims, pos = _read_token(data, pos)
        parts = dims.split()
        if len(parts) == 2:
            w, h = int(parts[0]), int(parts[1])
        else:
            w = int(parts[0])
            token, pos = _read_token(data, pos)
            h = int(token)
        scale_tok, pos = _read_token(data, pos)
        scale = float(scale_tok)
        count = w * h
        dtype = "<f4" if scale < 0 else ">f4"
        end = pos + 4 * count
        if end > len(data):
            raise DataError(f"{path}: truncated PFM payload")
        plane = np.frombuffer(data[pos:end], dtype=dtype).reshape(h, w)
        planes.append(np.flipud(plane).astype(np.float64))
        pos = end
    if not planes:
        raise DataError(f"{path}: empty PFM file")
    return planes


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data) and data[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("unexpected end of PFM header")
    return data[start:pos], pos + 1  # consume one separator byte


def write_pgm16(path, image: np.ndarray) -> None:
    """Write a 16-bit big-endian binary PGM (P5, maxval 65535)."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise DataError("PGM writer needs a 2D array")
    arr = np.clip(np.rint(arr), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    pos = 0
    magic, pos = _read_token(data, pos)
    if magic != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, pos = _read_token(data, pos)
    h, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 65535:
        raise DataError(f"{path}: expected 16-bit PGM, maxval {maxval}")
    arr = np.frombuffer(data[pos:pos + 2 * w * h], dtype=">u2").reshape(h, w)
    return arr.astype(np.uint16)
