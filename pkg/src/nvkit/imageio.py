"""8-bit RGB image IO: PNG (via Pillow) and binary PPM (P6, hand-rolled).

All decoders return uint8 arrays of shape [H, W, 3]; `to_float` /
`to_uint8` convert between storage and the [0, 1] float range the
pipeline computes in.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError


def to_float(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise ContractError(f"{path} is not a binary P6 PPM")
    # header: magic, width, height, maxval; comments allowed between fields
    tokens = []
    pos = 2
    while len(tokens) < 3:
        m = re.match(rb"(?:\s|#[^\n]*\n)*(\d+)", blob[pos:])
        if m is None:
            raise ContractError(f"malformed PPM header in {path}")
        tokens.append(int(m.group(1)))
        pos += m.end()
    width, height, maxval = tokens
    if maxval != 255:
        raise ContractError(f"only 8-bit PPM supported, {path} has maxval {maxval}")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    if len(blob) - pos < need:
        raise ContractError(f"truncated PPM payload in {path}")
    data = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"PPM writer needs [H,W,3], got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    """Decode PNG or P6 PPM to uint8 [H,W,3]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, img)
        return
    Image.fromarray(to_uint8(img), mode="RGB").save(path)
