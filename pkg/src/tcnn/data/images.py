"""Image IO: binary/ASCII PPM and PGM, plus T4F1 tensor fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..tensor import load_tensor

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".t4f")


class ImageDecodeError(ValueError):
    pass


def _tokens(blob: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageDecodeError("truncated header")
        out.append(blob[start:pos])
    return out, pos


def read_pnm(path: str | Path) -> np.ndarray:
    """Decode P2/P3/P5/P6 to a float array (channels, h, w) scaled to [0, 1]."""
    blob = Path(path).read_bytes()
    magic = blob[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ImageDecodeError(f"{path}: unsupported or missing PNM magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    try:
        (w, h, maxval), pos = _tokens(blob, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise ImageDecodeError(f"{path}: bad header ({exc})") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageDecodeError(f"{path}: bad dimensions or maxval")
    count = w * h * channels
    if magic in (b"P5", b"P6"):
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        pos += 1  # single whitespace byte after maxval
        data = np.frombuffer(blob, dtype=dtype, count=-1, offset=pos)
        if data.size < count:
            raise ImageDecodeError(f"{path}: expected {count} samples, found {data.size}")
        data = data[:count]
    else:
        vals = blob[pos:].split()
        if len(vals) < count:
            raise ImageDecodeError(f"{path}: expected {count} samples, found {len(vals)}")
        data = np.array([int(v) for v in vals[:count]])
    img = data.astype(np.float64).reshape(h, w, channels).transpose(2, 0, 1) / maxval
    return np.ascontiguousarray(img)


def write_pnm(path: str | Path, img: np.ndarray, maxval: int = 255) -> None:
    """Write a (channels, h, w) array in [0, 1] as binary PGM (1 channel) or PPM (3)."""
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("PNM images have 1 or 3 channels")
    q = np.clip(np.rint(np.asarray(img) * maxval), 0, maxval).astype(">u2" if maxval > 255 else "u1")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + q.transpose(1, 2, 0).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Any supported file as a float (3, h, w) array; grey images are replicated."""
    path = Path(path)
    if path.suffix.lower() == ".t4f":
        try:
            t = load_tensor(path)
        except ValueError as exc:
            raise ImageDecodeError(str(exc)) from None
        img = t[0]
    else:
        img = read_pnm(path)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise ImageDecodeError(f"{path}: expected 1 or 3 channels, got {img.shape[0]}")
    return img


def probe(path: str | Path) -> None:
    """Readability check used when scanning a dataset: the file must fully decode."""
    read_image(path)
