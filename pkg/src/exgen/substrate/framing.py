"""Framed binary files: one JSON header line, a little-endian blob, a CRC-64 trailer.

Shared by dataset files and checkpoints. The trailer is the CRC-64/XZ of the
blob as 8 little-endian bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Callable

from .kernels import crc64

__all__ = [
    "FileFormatError",
    "MalformedHeaderError",
    "TruncatedFileError",
    "ShapeMismatchError",
    "ChecksumMismatchError",
    "write_framed",
    "read_framed",
    "dumps_header",
]


class FileFormatError(ValueError):
    pass


class MalformedHeaderError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class ShapeMismatchError(FileFormatError):
    """Header dimensions disagree with the blob length."""


class ChecksumMismatchError(FileFormatError):
    pass


def dumps_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_framed(path: str | os.PathLike, header: dict, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(dumps_header(header))
        fh.write(b"\n")
        fh.write(blob)
        fh.write(struct.pack("<Q", crc64(blob)))
    os.replace(tmp, path)


def read_framed(path: str | os.PathLike, magic: str,
                blob_size: Callable[[dict], int]) -> tuple[dict, bytes]:
    """Read and verify a framed file.

    ``blob_size`` maps the parsed header to the expected blob length in bytes.
    A file shorter than header + blob + trailer is reported as truncated; a
    complete frame whose length still disagrees with the header is a shape
    mismatch.
    """
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise MalformedHeaderError(f"{path}: expected magic {magic!r}")
    try:
        expected = int(blob_size(header))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: incomplete header ({exc})") from None
    body = raw[nl + 1:]
    if len(body) < 8:
        raise TruncatedFileError(f"{path}: missing checksum trailer")
    blob, trailer = body[:-8], body[-8:]
    if len(blob) != expected:
        # a torn write ends early *and* leaves the trailer check failing
        (stored,) = struct.unpack("<Q", trailer)
        if len(blob) < expected and crc64(blob) != stored:
            raise TruncatedFileError(f"{path}: blob has {len(blob)} bytes, header implies {expected}")
        raise ShapeMismatchError(f"{path}: header implies {expected} blob bytes, found {len(blob)}")
    (stored,) = struct.unpack("<Q", trailer)
    if crc64(blob) != stored:
        raise ChecksumMismatchError(f"{path}: CRC-64 mismatch")
    return header, blob
