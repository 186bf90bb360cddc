"""Binary PGM images and small CSV/sample-dump helpers."""

from __future__ import annotations

import csv
import os
import struct

import numpy as np

__all__ = [
    "read_pgm",
    "write_pgm",
    "write_csv",
    "read_csv",
    "write_samples",
    "read_samples",
    "load_image_dir",
]


def _tokens(data: bytes, start: int, n: int) -> tuple[list[bytes], int]:
    """Read ``n`` whitespace separated header tokens, skipping ``#`` comments."""
    out = []
    pos = start
    while len(out) < n:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        out.append(data[pos:end])
        pos = end
    return out, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary ``P5`` PGM into float64 intensities in ``[0, 1]``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (w, h, maxval), pos = _tokens(data, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return raw.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, img, maxval: int = 255, normalize: bool = False) -> None:
    """Write intensities as a binary PGM, clamping to ``[0, 1]`` and quantizing.

    With ``normalize`` the image is first affinely mapped onto ``[0, 1]``.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D image")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    if normalize:
        lo, hi = float(img.min()), float(img.max())
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def load_image_dir(path) -> list[np.ndarray]:
    """All ``*.pgm`` images in a directory, in lexicographic filename order."""
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".pgm"))
    return [read_pgm(os.path.join(path, n)) for n in names]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


_SAMPLE_MAGIC = b"EBMS"


def write_samples(path, samples) -> None:
    """Dump a ``(count, dim)`` array as little-endian float64 after a 20-byte header."""
    samples = np.asarray(samples, dtype=np.float64)
    samples = samples.reshape(samples.shape[0], -1)
    count, dim = samples.shape
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_MAGIC + struct.pack("<QQ", dim, count))
        fh.write(samples.astype("<f8").tobytes())


def read_samples(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(20)
        if head[:4] != _SAMPLE_MAGIC:
            raise ValueError(f"{path}: not a sample dump")
        dim, count = struct.unpack("<QQ", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(count, dim).astype(np.float64)
