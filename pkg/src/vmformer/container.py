"""Binary tensor container shared by checkpoints and dataset caches.

Layout (all integers little-endian)::

    magic    b"VMF1"
    version  u32
    meta_len u32, meta (UTF-8 key=value text)
    count    u32
    per tensor:
        name_len u16, name (UTF-8)
        dtype u8 (0=f32, 1=f64), rank u8, extents u32 * rank
        nbytes u64, crc32 u32
        payload (raw little-endian)

Per-tensor overhead is therefore name_len + 16 + 4*rank bytes.
"""

import struct
import zlib

import numpy as np

MAGIC = b"VMF1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(ValueError):
    pass


def header_size(meta):
    return 16 + len(meta.encode("utf-8"))


def tensor_record_size(name, arr):
    return len(name.encode("utf-8")) + 16 + 4 * arr.ndim + arr.nbytes


def write_container(path, meta, tensors):
    meta_b = meta.encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_b)))
        f.write(meta_b)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr, order="C")
            if arr.dtype not in _TAGS:
                raise ContainerError(f"unsupported dtype {arr.dtype} for {name}")
            name_b = name.encode("utf-8")
            payload = arr.astype(_DTYPES[_TAGS[arr.dtype]], copy=False).tobytes()
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
            f.write(payload)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ContainerError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path):
    """Returns (meta text, dict name -> array)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic: not a VMF1 file")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise ContainerError(f"unsupported format version {version}")
    meta = r.take(meta_len).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise ContainerError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}I")
        nbytes, crc = r.unpack("<QI")
        dt = _DTYPES[tag]
        if nbytes != int(np.prod(shape)) * dt.itemsize:
            raise ContainerError(f"payload size mismatch for {name}")
        payload = r.take(nbytes)
        if zlib.crc32(payload) != crc:
            raise ContainerError(f"checksum mismatch for {name}")
        tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(r.buf):
        raise ContainerError(f"{len(r.buf) - r.pos} trailing bytes after last tensor")
    return meta, tensors
