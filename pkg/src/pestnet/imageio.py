"""Netpbm codecs: binary PPM (P6) and PGM (P5).

Other formats are decoded through Pillow when it is installed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

PNM_SUFFIXES = {".ppm", ".pgm", ".pnm"}


def _read_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"non-numeric netpbm header fields {tokens[1:]}") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"invalid netpbm dimensions {width}x{height} maxval {maxval}")
    return magic, width, height, maxval, pos


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Decode P5/P6 bytes into an integer array (h, w) or (h, w, 3) and its maxval."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file (magic P5/P6 expected)")
    magic, w, h, maxval, pos = _read_header(buf)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    need = count * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"raster truncated: need {need} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape), maxval


def encode_pnm(arr: np.ndarray, maxval: int = 255) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot encode array of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise FormatError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    header = magic + f"\n{w} {h}\n{maxval}\n".encode()
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def read_ppm(path) -> np.ndarray:
    """RGB pixels of a P6 file as float64 in [0, 1], shape (h, w, 3)."""
    arr, maxval = decode_pnm(Path(path).read_bytes())
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a colour (P6) image")
    return arr / float(maxval)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write float [0, 1] or uint8 RGB pixels as P6."""
    Path(path).write_bytes(encode_pnm(_to_u8(pixels)))


def read_pgm(path) -> np.ndarray:
    arr, maxval = decode_pnm(Path(path).read_bytes())
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected a greyscale (P5) image")
    return arr / float(maxval)


def write_pgm(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(_to_u8(values)))


def _to_u8(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == np.uint8:
        return x
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def probe(path) -> bool:
    """Cheap readability check used while scanning dataset trees."""
    path = Path(path)
    try:
        if path.suffix.lower() in PNM_SUFFIXES:
            with open(path, "rb") as fh:
                head = fh.read(512)
            if head[:2] != b"P6":
                return False
            _read_header(head)
            return True
        from PIL import Image  # optional

        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def read_image(path) -> np.ndarray:
    """RGB float pixels in [0, 1]; PPM natively, anything else via Pillow."""
    path = Path(path)
    if path.suffix.lower() in PNM_SUFFIXES:
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError(f"{path}: only PPM is supported without Pillow; convert it first") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
