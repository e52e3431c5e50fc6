"""Little-endian binary tensor container.

Layout::

    b"GCAT"  u32 version (=1)  u32 count
    count × { u16 name_len, utf-8 name, 4 × u64 shape, f64 payload }

Arrays with fewer than four dims are stored with leading unit dims.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Mapping, Union

import numpy as np

MAGIC = b"GCAT"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def _as_4d_shape(shape: tuple) -> tuple:
    if len(shape) > 4:
        raise WeightFormatError(f"cannot store {len(shape)}-d array")
    return (1,) * (4 - len(shape)) + tuple(shape)


TensorItems = Union[Mapping[str, np.ndarray], Iterable[tuple[str, np.ndarray]]]


def dumps(tensors: TensorItems) -> bytes:
    items = list(tensors.items() if hasattr(tensors, "items") else tensors)
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    seen = set()
    for name, arr in items:
        if name in seen:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightFormatError(f"name too long: {name[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4Q", *_as_4d_shape(arr.shape)))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise WeightFormatError("bad magic: not a GCAT tensor file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise WeightFormatError(f"truncated name in entry {i}")
            pos += nlen
            shape = struct.unpack_from("<4Q", buf, pos)
            pos += 32
        except struct.error as exc:
            raise WeightFormatError(f"truncated header in entry {i}") from exc
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"corrupt name in entry {i}") from exc
        n = int(np.prod(shape))
        end = pos + 8 * n
        if end > len(buf):
            raise WeightFormatError(f"truncated payload for {name!r}")
        if name in out:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(
            np.float64).reshape(shape)
        pos = end
    if pos != len(buf):
        raise WeightFormatError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save(path, tensors: TensorItems) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
