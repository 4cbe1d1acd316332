"""Binary PGM (P5, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise PGMError(f"expected a 2-D uint8 array, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError("truncated header")
        out.append(raw[start:pos])
    return out, pos + 1  # single whitespace byte ends the header


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, offset = _tokens(raw, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as err:
        raise PGMError(f"{path}: malformed header") from err
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} unsupported")
    body = raw[offset:offset + w * h]
    if len(body) != w * h:
        raise PGMError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()
