"""Binary weight files: magic ``VETW``, u16 version, u32 count, then per
parameter a u16-prefixed UTF-8 name, u8 rank, u32 extents and a float32
payload. Everything little-endian."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, FormatError, TruncatedPayloadError, UnsupportedVersionError

MAGIC = b"VETW"
VERSION = 1


def save_checkpoint(weights, path) -> None:
    """Write ``weights`` (mapping name -> array or Parameter) in insertion order."""
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(weights))]
    for name, value in weights.items():
        arr = np.array(getattr(value, "data", value), dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise TruncatedPayloadError(f"{self.path}: unexpected end of file at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedPayloadError(f"{self.path}: unexpected end of file at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    r = _Reader(raw, path)
    r.pos = 4
    version, count = r.take("<HI")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} not supported")
    out = {}
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.bytes(nlen).decode("utf-8")
        (rank,) = r.take("<B")
        shape = r.take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.bytes(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name in out:
            raise FormatError(f"{path}: duplicate parameter {name!r}")
        out[name] = arr
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return out
