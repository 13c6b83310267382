"""``.ledf`` checkpoint files.

Layout, all integers little-endian::

    b"LEDF"
    u32   format version
    32B   sha256 digest of the canonical config text
    u32   metadata length, then that many bytes of UTF-8 JSON
          (RNG stream states, epoch, optimizer step, config text)
    u32   tensor count, then per tensor:
          u16 name length, name (UTF-8), u32 ndim, ndim x u64 dims,
          prod(dims) x f64 payload

Metadata JSON is written with sorted keys and no whitespace, so writing the
same state twice gives identical bytes.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LEDF"
VERSION = 1


@dataclass
class Checkpoint:
    digest: str
    tensors: dict
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def _encode(ckpt):
    out = [MAGIC, struct.pack("<I", ckpt.version)]
    digest = bytes.fromhex(ckpt.digest)
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes of sha256")
    out.append(digest)
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(meta)))
    out.append(meta)
    out.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def save_checkpoint(path, ckpt):
    path = Path(path)
    data = _encode(ckpt)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_digest=None):
    """Read a checkpoint; raise :class:`CheckpointError` on any mismatch."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a LEDF checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = r.take(32).hex()
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError(f"{path}: config digest {digest[:12]} does not match {expected_digest[:12]}")
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    if r.pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return Checkpoint(digest, tensors, metadata, version)
