"""Binary PGM/PPM writers (and a reader for round-trip checks)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_u8(arr: np.ndarray, normalize: bool) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if normalize:
        lo, hi = float(a.min()), float(a.max())
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def _header(magic: str, h: int, w: int, comment: str | None) -> bytes:
    lines = [magic]
    if comment:
        lines.extend("# " + c for c in comment.splitlines())
    lines.append(f"{w} {h}")
    lines.append("255")
    return ("\n".join(lines) + "\n").encode("ascii", "backslashreplace")


def _write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)


def write_pgm(path, image: np.ndarray, comment: str | None = None, normalize: bool = True) -> None:
    """Write a 2-D array as 8-bit grayscale; min-max normalized unless told otherwise."""
    img = _to_u8(image, normalize)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D array")
    _write(path, _header("P5", *img.shape, comment) + img.tobytes())


def write_ppm(path, image: np.ndarray, comment: str | None = None) -> None:
    """Write an H×W×3 array with values in [0, 1] as 8-bit colour."""
    img = _to_u8(image, normalize=False)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an H×W×3 array")
    _write(path, _header("P6", img.shape[0], img.shape[1], comment) + img.tobytes())


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf[pos:], dtype=np.uint8)
    return data.reshape(h, w, 3) if magic == "P6" else data.reshape(h, w)
