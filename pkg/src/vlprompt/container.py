"""Little-endian tensor container used for model checkpoints and prompt files.

Layout::

    magic[4] | u32 version | u64 seed | u8 frozen | u32 n_tensors
    per tensor: u16 name_len | name | u8 rank | u64 dims[rank] | f64 payload | u64 fnv1a(payload)
    u32 n_words | per word: u16 len | utf-8
    u32 meta_len | utf-8 JSON (sorted keys)
"""
import json
import struct
from collections import OrderedDict

import numpy as np

from .exceptions import CorruptionError, FormatError

VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data):
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def dumps(magic, tensors, seed=0, frozen=False, words=(), meta=None):
    out = [magic, struct.pack("<IQBI", VERSION, int(seed), int(bool(frozen)), len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        payload = arr.tobytes()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(payload)
        out.append(struct.pack("<Q", fnv1a64(payload)))
    out.append(struct.pack("<I", len(words)))
    for w in words:
        raw = w.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    blob = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated container: wanted {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf, magic):
    """Parse a container; returns ``(tensors, seed, frozen, words, meta)``."""
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != magic:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {magic!r}")
    r.take(4)
    version, seed, frozen, count = r.unpack("<IQBI")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(8 * size)
        (check,) = r.unpack("<Q")
        if fnv1a64(payload) != check:
            raise CorruptionError(f"checksum mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    (n_words,) = r.unpack("<I")
    words = []
    for _ in range(n_words):
        (n,) = r.unpack("<H")
        words.append(r.take(n).decode("utf-8"))
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    if r.pos != len(buf):
        raise CorruptionError(f"{len(buf) - r.pos} trailing bytes after container")
    return tensors, seed, bool(frozen), words, meta
