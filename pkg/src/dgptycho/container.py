"""
Binary container for datasets, checkpoints and snapshots.

Layout (all integers little-endian, arrays row-major little-endian)::

    b"P4DS"                       magic
    u32                           format version
    u64 + bytes                   JSON metadata (UTF-8)
    repeated until end of file:
        u16 + bytes               section name (UTF-8)
        u8  + bytes               numpy dtype string, e.g. "<f4"
        u8  + ndim * u64          shape
        u64 + bytes               payload (itemsize * prod(shape) bytes)

Readers keep sections they do not recognise so that rewriting a file never
drops data.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ContainerError, TruncatedSectionError, VersionError

MAGIC = b"P4DS"
FORMAT_VERSION = 1


@dataclass
class Container:
    metadata: dict = field(default_factory=dict)
    sections: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.hasobject:
        raise ContainerError("object arrays cannot be stored")
    if arr.dtype.byteorder == ">" or (arr.dtype.byteorder == "=" and np.little_endian is False):
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    # ascontiguousarray would promote 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _dtype_tag(dt: np.dtype) -> bytes:
    s = dt.str
    if s[0] == "=":
        s = "<" + s[1:]
    return s.encode("ascii")


def dumps(metadata: dict, sections: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", version))
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    for name, arr in sections.items():
        arr = _le(arr)
        nb = name.encode("utf-8")
        tag = _dtype_tag(arr.dtype)
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", len(tag)))
        buf.write(tag)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes(order="C")
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedSectionError(f"file ends inside {what} (needed {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def loads(data: bytes, max_version: int = FORMAT_VERSION) -> Container:
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a container file (magic {data[:4]!r})")
    r = _Reader(data)
    r.pos = 4
    (version,) = r.unpack("<I", "header")
    if version > max_version:
        raise VersionError(f"container version {version} is newer than supported version {max_version}")
    (mlen,) = r.unpack("<Q", "header")
    meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    sections: dict[str, np.ndarray] = {}
    while not r.done:
        (nlen,) = r.unpack("<H", "section header")
        name = r.take(nlen, "section header").decode("utf-8")
        (tlen,) = r.unpack("<B", f"section {name!r}")
        dt = np.dtype(r.take(tlen, f"section {name!r}").decode("ascii"))
        (ndim,) = r.unpack("<B", f"section {name!r}")
        shape = r.unpack(f"<{ndim}Q", f"section {name!r}")
        (nbytes,) = r.unpack("<Q", f"section {name!r}")
        expected = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise ContainerError(f"section {name!r} declares {nbytes} bytes, dtype and shape imply {expected}")
        payload = r.take(nbytes, f"section {name!r}")
        sections[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return Container(meta, sections, version)


def write_container(path, metadata: dict, sections: dict[str, np.ndarray]):
    Path(path).write_bytes(dumps(metadata, sections))


def read_container(path) -> Container:
    return loads(Path(path).read_bytes())
