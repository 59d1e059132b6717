"""Minimal binary Netpbm (P5 grayscale / P6 color) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _write(path, magic: str, data: np.ndarray, maxval: int, comments=()):
    h, w = data.shape[:2]
    header = [magic] + [f"# {c}" for c in comments] + [f"{w} {h}", str(maxval)]
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(data, dtype=dtype).tobytes())


def _read(path):
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    comments: list[str] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise NetpbmError(f"{path}: truncated header")
        c = raw[pos : pos + 1]
        if c == b"#":
            end = raw.index(b"\n", pos)
            comments.append(raw[pos + 1 : end].decode("ascii").strip())
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0].decode("ascii")
    if magic not in ("P5", "P6"):
        raise NetpbmError(f"{path}: unsupported format {magic}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise NetpbmError(f"{path}: malformed header") from e
    channels = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    n = w * h * channels
    if len(raw) - pos < n * dtype.itemsize:
        raise NetpbmError(f"{path}: raster data truncated")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape).astype(np.int64), maxval, comments


def write_mask(path, mask: np.ndarray):
    _write(path, "P5", np.where(mask, 255, 0), 255)


def read_mask(path) -> np.ndarray:
    data, _, _ = _read(path)
    if data.ndim != 2:
        raise NetpbmError(f"{path}: expected a grayscale mask")
    return data > 127


def write_rgb(path, image: np.ndarray):
    """Write a float image in ``[0, 1]`` as 8-bit PPM."""
    _write(path, "P6", np.clip(np.rint(np.asarray(image) * 255.0), 0, 255), 255)


def read_rgb(path) -> np.ndarray:
    data, maxval, _ = _read(path)
    if data.ndim != 3:
        raise NetpbmError(f"{path}: expected a color image")
    return data / float(maxval)


def write_depth(path, depth: np.ndarray):
    """16-bit depth map; 0 marks a miss, hits map linearly onto 1..65535."""
    hit = np.isfinite(depth)
    if hit.any():
        lo, hi = float(depth[hit].min()), float(depth[hit].max())
    else:
        lo, hi = 0.0, 1.0
    span = hi - lo if hi > lo else 1.0
    q = np.zeros(depth.shape, dtype=np.int64)
    q[hit] = 1 + np.rint((depth[hit] - lo) / span * 65534).astype(np.int64)
    _write(path, "P5", q, 65535, comments=[f"depth-range {lo!r} {hi!r}"])


def read_depth(path) -> np.ndarray:
    data, maxval, comments = _read(path)
    rng = [c for c in comments if c.startswith("depth-range")]
    if not rng:
        raise NetpbmError(f"{path}: missing depth-range comment")
    lo, hi = (float(x) for x in rng[0].split()[1:3])
    span = hi - lo if hi > lo else 1.0
    out = np.full(data.shape, np.nan)
    hit = data > 0
    out[hit] = lo + (data[hit] - 1) / 65534.0 * span
    return out
