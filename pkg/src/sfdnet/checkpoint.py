"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"SFDMFCK\\0"
    version      u32
    meta_len     u32       length of the meta JSON
    meta         bytes     canonical JSON: config, epoch, rng, bank metadata
    n_arrays     u32
    per array:
      name_len   u32
      name       utf-8 bytes
      ndim       u32
      dims       ndim x u64
      data       prod(dims) x f64
    crc32        u32       over every preceding byte

Arrays are written in sorted name order, so load -> save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .config import canonical_json, config_from_dict, config_to_dict
from .extractor import build_extractor
from .mfcc import CenterBank

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "ChecksumError",
    "VersionMismatchError",
    "to_bytes",
    "from_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "atomic_write_bytes",
]

MAGIC = b"SFDMFCK\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def to_bytes(model, epoch: int = 0, extra: dict | None = None) -> bytes:
    bank = model.bank
    meta = {
        "config": config_to_dict(model.config),
        "epoch": int(epoch),
        "rng": {"seed": int(model.config.seed), "epoch": int(epoch)},
        "bank": {
            "num_classes": bank.num_classes,
            "centers_per_class": bank.centers_per_class,
            "dim": bank.dim,
            "scale": bank.scale,
            "delta": bank.delta,
        },
        "extra": extra or {},
    }
    meta_b = canonical_json(meta).encode()
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_b)), meta_b]
    arrays = model.parameters()
    out.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(buf: bytes):
    """Rebuild a model from checkpoint bytes; returns ``(model, meta)``."""
    from .trainer import Model

    if len(buf) < len(MAGIC) + 12 or buf[:len(MAGIC)] != MAGIC:
        raise ChecksumError("not a checkpoint, or truncated before the header")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checksum mismatch (truncated or corrupted checkpoint)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(r.take(r.u32()).decode())
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last array")

    cfg = config_from_dict(meta["config"])
    ext = build_extractor(cfg.extractor, 0)
    missing = (set(ext.params) | {"centers"}) ^ set(arrays)
    if missing:
        raise CheckpointError(f"parameter names do not match the config: {sorted(missing)}")
    for name in ext.params:
        ext.params[name] = arrays[name]
    b = meta["bank"]
    bank = CenterBank(arrays["centers"], b["num_classes"], b["centers_per_class"], b["scale"], b["delta"])
    return Model(ext, bank, cfg), meta


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model, path, epoch: int = 0, extra: dict | None = None) -> None:
    atomic_write_bytes(path, to_bytes(model, epoch, extra))


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
