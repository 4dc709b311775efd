"""Versioned binary tensor archive.

Layout (all integers little-endian)::

    magic   8 bytes   b"MSLRTAR1"
    version u32
    count   u32
    count x record:
        name_len u32, name utf-8
        dtype    u8   (see DTYPE_TAGS)
        rank     u32
        dims     rank x u64
        payload  little-endian, C order
"""
import io
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MSLRTAR1"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("i1"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
    np.dtype("u1"): 5,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ArchiveError(ValueError):
    pass


def dumps(tensors):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        if dt not in DTYPE_TAGS:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise ArchiveError("bad magic")
    pos = 8
    version, count = struct.unpack_from("<II", view, pos)
    pos += 8
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", view, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            dt = TAG_DTYPES.get(tag)
            if dt is None:
                raise ArchiveError(f"unknown dtype tag {tag} for {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise ArchiveError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise ArchiveError(f"truncated archive: {exc}") from None
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes")
    return out


def save(path, tensors):
    blob = dumps(tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def meta_tensor(text):
    """Encode a short string as a u8 tensor (archives carry tensors only)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def meta_text(arr):
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")
