"""Binary weight files.

Layout (little-endian)::

    magic   4 bytes  b"A2LW"
    version u32      1
    count   u32
    count x entry:
        name_len u16, name (utf-8), dtype u8 (0 = f32, 1 = f64), rank u8,
        rank x u32 extents, raw values

Entries cover learned parameters and batch-norm running statistics.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"A2LW"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        code = CODE_OF.get(arr.dtype)
        if code is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError("bad magic: not an A2LW weight file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for i in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise FormatError(f"entry {i}: truncated name")
            pos += nlen
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            if code not in DTYPE_CODES:
                raise FormatError(f"entry {name!r}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = DTYPE_CODES[code]
            n = int(np.prod(shape, dtype=np.int64))
            if pos + n * dt.itemsize > len(buf):
                raise FormatError(f"entry {name!r}: truncated data")
            if name in out:
                raise FormatError(f"duplicate entry {name!r}")
            out[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
            pos += n * dt.itemsize
    except struct.error:
        raise FormatError("truncated weight file") from None
    except UnicodeDecodeError:
        raise FormatError("entry name is not valid UTF-8") from None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save_weights(model, path) -> None:
    Path(path).write_bytes(dumps(model.state()))


def load_weights(model, path, reinit_head: bool = False, seed: int = 0) -> list[str]:
    """Load every entry after validating all names and shapes (all-or-nothing).

    With ``reinit_head`` the classifier entries may be absent or mismatched;
    the head is then freshly initialized. Returns the names that were skipped.
    """
    entries = loads(Path(path).read_bytes())
    state = model.state()
    head = model.head_prefix
    skipped, problems = [], []
    for name, arr in entries.items():
        if name not in state:
            if reinit_head and name.startswith(head):
                skipped.append(name)
                continue
            problems.append(f"unknown entry {name!r}")
        elif arr.shape != state[name].shape:
            if reinit_head and name.startswith(head):
                skipped.append(name)
                continue
            problems.append(f"{name!r}: shape {arr.shape}, model expects {state[name].shape}")
    missing = [n for n in state if n not in entries and not (reinit_head and n.startswith(head))]
    problems += [f"missing entry {n!r}" for n in missing]
    if problems:
        raise FormatError("; ".join(problems))
    for name, arr in entries.items():
        if name in skipped:
            continue
        state[name][...] = arr.astype(state[name].dtype)
    if reinit_head and (skipped or any(n.startswith(head) and n not in entries for n in state)):
        model.reinit_head(seed)
    return skipped
