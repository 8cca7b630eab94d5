"""Checksummed binary containers and atomic file writes.

All binary artifacts share one envelope: 4 magic bytes, a u32 format
version, a format-specific payload, and a trailing 64-bit checksum over
everything before it. Numbers are little-endian throughout.
"""

import hashlib
import os
import struct
import tempfile

from .errors import CorruptArtifactError

FORMAT_VERSION = 1

MAGIC_MODEL = b"TRWD"   # progress-model checkpoints
MAGIC_DEMOS = b"TRDM"   # demonstration datasets
MAGIC_POLICY = b"TRQN"  # action-value policy checkpoints


def checksum64(data):
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def atomic_write_bytes(path, data):
    """Write via a temp file + rename so readers never see partial content."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_container(path, magic, payload):
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    body = magic + struct.pack("<I", FORMAT_VERSION) + payload
    atomic_write_bytes(path, body + struct.pack("<Q", checksum64(body)))


def read_container(path, magic):
    """Return the payload, rejecting bad magic, version, or checksum."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise CorruptArtifactError(f"{path}: truncated container")
    if raw[:4] != magic:
        raise CorruptArtifactError(
            f"{path}: bad magic {raw[:4]!r}, expected {magic!r}"
        )
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CorruptArtifactError(
            f"{path}: unsupported format version {version}"
        )
    body, (stored,) = raw[:-8], struct.unpack_from("<Q", raw, len(raw) - 8)
    if checksum64(body) != stored:
        raise CorruptArtifactError(
            f"{path}: checksum mismatch "
            f"(stored {stored:#018x}, computed {checksum64(body):#018x})"
        )
    return body[8:]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class PayloadReader:
    """Sequential reader for container payloads."""

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptArtifactError("payload ended early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def done(self):
        if self.pos != len(self.data):
            raise CorruptArtifactError("trailing bytes in payload")
