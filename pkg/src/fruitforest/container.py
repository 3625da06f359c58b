"""Versioned binary container with a trailing CRC-32.

File layout: 4-byte magic, little-endian uint32 format version, payload,
little-endian uint32 CRC-32 of everything before the checksum. Headers
inside payloads are canonical JSON (sorted keys, compact separators) so a
load/save round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Any

from .errors import ChecksumError, ContainerError, VersionMismatchError


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack_header(obj: Any) -> bytes:
    """Length-prefixed canonical JSON header."""
    blob = canonical_json(obj)
    return struct.pack("<I", len(blob)) + blob


def unpack_header(payload: bytes) -> tuple[Any, int]:
    """Return (header object, offset of the first byte after the header)."""
    if len(payload) < 4:
        raise ContainerError("payload too short for a header")
    (length,) = struct.unpack_from("<I", payload, 0)
    end = 4 + length
    if len(payload) < end:
        raise ContainerError("header extends past end of payload")
    return json.loads(payload[4:end].decode("utf-8")), end


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temporary file and rename, so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_container(path: str, magic: bytes, version: int, payload: bytes) -> None:
    if len(magic) != 4:
        raise ContainerError("magic must be exactly 4 bytes")
    blob = magic + struct.pack("<I", version) + payload
    blob += struct.pack("<I", zlib.crc32(blob))
    atomic_write_bytes(path, blob)


def read_container(path: str, magic: bytes, version: int) -> bytes:
    """Validate checksum, magic, and version; return the payload bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ChecksumError(f"{path}: file truncated ({len(data)} bytes)")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    if data[:4] != magic:
        raise ContainerError(
            f"{path}: bad magic {data[:4]!r}, expected {magic!r}"
        )
    (found,) = struct.unpack_from("<I", data, 4)
    if found != version:
        raise VersionMismatchError(
            f"{path}: file format version {found}, supported version {version}"
        )
    return data[8:-4]
