"""Framed binary container shared by checkpoints and datasets.

Layout (all integers little-endian)::

    magic        4 bytes
    version      uint32
    n_blobs      uint32, then per blob: uint64 length + UTF-8 JSON bytes
    n_tensors    uint32, then per tensor:
        uint16 name length + UTF-8 name
        uint8  dtype code (0 = float64, 1 = int64)
        uint8  ndim, then ndim x uint64 extents
        row-major payload (8 bytes per element)

JSON blobs are written with sorted keys, so save -> load -> save is byte-identical.
"""

import json
import struct

import numpy as np

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {"f": 0, "i": 1, "u": 1, "b": 1}


class FormatError(ValueError):
    """A file does not match the expected container layout."""

    def __init__(self, code, message):
        self.code = code
        super().__init__(f"{code}: {message}")


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(magic, version, blobs, tensors):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    parts = [magic, struct.pack("<II", version, len(blobs))]
    for blob in blobs:
        raw = blob if isinstance(blob, bytes) else dump_json(blob)
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES[arr.dtype.kind]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf, magic, version):
    """Return ``(blobs, tensors)``; raises :class:`FormatError` on any mismatch."""
    if buf[:4] != magic:
        raise FormatError("BAD_MAGIC", f"expected {magic!r}, found {bytes(buf[:4])!r}")
    try:
        got_version, n_blobs = struct.unpack_from("<II", buf, 4)
        if got_version != version:
            raise FormatError("VERSION_MISMATCH", f"file version {got_version}, this build reads {version}")
        off = 12
        blobs = []
        for _ in range(n_blobs):
            (n,) = struct.unpack_from("<Q", buf, off)
            off += 8
            blobs.append(json.loads(bytes(buf[off : off + n]).decode("utf-8")))
            off += n
        (n_t,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(n_t):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = bytes(buf[off : off + ln]).decode("utf-8")
            off += ln
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            dt = _DTYPES[code]
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
            off += count * 8
            tensors[name] = arr.astype(np.float64 if code == 0 else np.int64)
    except (struct.error, KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError("TRUNCATED", f"malformed container: {exc}") from exc
    if off != len(buf):
        raise FormatError("TRAILING_BYTES", f"{len(buf) - off} unexpected bytes after the last tensor")
    return blobs, tensors


def write(path, magic, version, blobs, tensors):
    data = encode(magic, version, blobs, tensors)
    with open(path, "wb") as f:
        f.write(data)
    return data


def read(path, magic, version):
    with open(path, "rb") as f:
        buf = f.read()
    return decode(buf, magic, version)
