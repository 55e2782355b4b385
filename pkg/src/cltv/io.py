"""Versioned binary container and atomic file helpers.

Layout of a bundle file::

    8s   magic  b"CLTVBNDL"
    u32  format version
    u32  reserved (0)
    u64  header length in bytes
    ...  header: UTF-8 JSON, sorted keys
    ...  array payloads, each 8-byte aligned, little-endian

The header holds caller metadata under ``"meta"`` and, under ``"arrays"``,
one ``{"dtype", "shape", "offset"}`` entry per named array.  Offsets are
relative to the first payload byte.  Identical inputs give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"CLTVBNDL"
VERSION = 1
_HEAD = struct.Struct("<8sIIQ")
_ALLOWED = {"<f8", "<f4", "<i8", "<i4", "<u8", "|u1", "|b1"}


def _align(n: int) -> int:
    return (n + 7) & ~7


def encode_bundle(meta: dict, arrays: dict) -> bytes:
    specs = {}
    payload = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
        a = np.ascontiguousarray(a, dtype=dt)
        if a.dtype.str not in _ALLOWED:
            raise TypeError(f"array {name!r}: unsupported dtype {a.dtype}")
        raw = a.tobytes()
        specs[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset}
        payload.append(raw)
        pad = _align(len(raw)) - len(raw)
        if pad:
            payload.append(b"\0" * pad)
        offset += len(raw) + pad
    header = json.dumps({"meta": meta, "arrays": specs}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    header += b" " * (_align(len(header)) - len(header))
    return _HEAD.pack(MAGIC, VERSION, 0, len(header)) + header + b"".join(payload)


def decode_bundle(buf: bytes, source="<bytes>") -> tuple[dict, dict]:
    if len(buf) < _HEAD.size:
        raise DataError(f"{source}: truncated bundle")
    magic, version, _, hlen = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise DataError(f"{source}: not a bundle file")
    if version != VERSION:
        raise DataError(f"{source}: unsupported bundle version {version}")
    start = _HEAD.size
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for name, spec in header["arrays"].items():
        dt = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(buf, dtype=dt, count=count, offset=base + spec["offset"])
        arrays[name] = a.reshape(shape).copy()
    return header["meta"], arrays


def write_bundle(path, meta: dict, arrays: dict) -> None:
    atomic_write_bytes(path, encode_bundle(meta, arrays))


def read_bundle(path) -> tuple[dict, dict]:
    path = Path(path)
    return decode_bundle(path.read_bytes(), path)


@contextmanager
def atomic_path(path):
    """Yield a temp path beside ``path``; rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
