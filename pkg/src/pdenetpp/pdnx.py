"""Bit-exact binary container for dense float64 tensors.

Layout, all integers little-endian:

    magic   "PDNX1" plus a zero byte (6 bytes)
    u32     format version, currently 1
    u32     ndims
    u64     dims[ndims]
    f64     payload, row-major
    u64     payload byte length (trailer; must equal 8 * prod(dims))

Writes go through a temporary file in the same directory followed by an
atomic rename, so a reader never observes a partial file.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"PDNX1\x00"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "atomic_write_bytes", "read_pdnx", "write_pdnx"]


def atomic_write_bytes(path, data):
    """Write bytes to path via a same-directory temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-write-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_pdnx(path, array):
    """Serialize a float64 array (any rank, row-major) to path atomically."""
    array = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    dims = array.shape
    payload = array.tobytes(order="C")
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<II", VERSION, len(dims)),
            struct.pack(f"<{len(dims)}Q", *dims),
            payload,
            struct.pack("<Q", len(payload)),
        ]
    )
    atomic_write_bytes(path, blob)


def read_pdnx(path):
    """Read a tensor written by write_pdnx, validating the full layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 + 8:
        raise ValueError("truncated tensor file")
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("bad magic; not a PDNX tensor file")
    version, ndims = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"unsupported PDNX version {version}")
    offset = len(MAGIC) + 8
    if len(blob) < offset + 8 * ndims + 8:
        raise ValueError("truncated tensor file")
    dims = struct.unpack_from(f"<{ndims}Q", blob, offset)
    offset += 8 * ndims
    count = int(np.prod(dims, dtype=np.uint64))
    (trailer,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    if trailer != 8 * count:
        raise ValueError("payload length trailer disagrees with dims")
    if len(blob) - 8 - offset != 8 * count:
        raise ValueError("payload size disagrees with dims")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64, copy=True)
