"""Frame and mask file I/O: 8-bit RGB PNG and binary PGM masks."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .renderer import Frame


def save_png(frame: Frame, path) -> None:
    """Write pixels as 8-bit RGB, values mapped linearly from [0, 1]."""
    data = np.round(frame.pixels * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_png(path, mask: np.ndarray | None = None) -> Frame:
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return Frame(data, mask)


def save_mask_pgm(mask: np.ndarray, path) -> None:
    """Write a boolean mask as binary PGM (P5), True -> 255."""
    m = np.asarray(mask, dtype=bool)
    data = np.where(m, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def load_mask_pgm(path) -> np.ndarray:
    """Read a PGM mask; any nonzero sample is True."""
    with open(path, "rb") as f:
        raw = f.read()
    # header: magic, width, height, maxval; comments allowed
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] not in (b"P5", b"P2"):
        raise ValueError(f"not a PGM file: magic {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tokens[0] == b"P5":
        pos += 1  # single whitespace after maxval
        count = width * height * (2 if maxval > 255 else 1)
        data = np.frombuffer(raw[pos : pos + count], dtype=np.uint16 if maxval > 255 else np.uint8)
        if data.size != width * height:
            raise ValueError("truncated PGM payload")
    else:
        data = np.array(raw[pos:].split(), dtype=int)
        if data.size != width * height:
            raise ValueError("truncated PGM payload")
    return (data.reshape(height, width) != 0)
