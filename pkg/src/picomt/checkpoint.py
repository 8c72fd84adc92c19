"""Binary checkpoint container: named float32 tensors plus config and metadata.

Layout (all integers little-endian):

    magic   4 bytes  b"PMCK"
    version u32
    config  u32 length + UTF-8 text (canonical key=value snapshot)
    meta    u32 length + canonical JSON (vocab hashes, RNG state, counters)
    count   u32 number of tensors, then per tensor, sorted by name:
        name  u16 length + UTF-8 bytes
        rank  u8, dims u32 each
        data  float32 little-endian, row-major
    footer  b"END!" + sha256 of everything before the footer

Writes go to a temp file and rename into place, so a crash never leaves a
half-written file under the target name.  Loading verifies magic, version,
and digest and fails with an integrity error rather than garbage tensors.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError

MAGIC = b"PMCK"
FOOTER = b"END!"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    config_bytes = ckpt.config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(config_bytes)))
    parts.append(config_bytes)
    meta_bytes = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    names = sorted(ckpt.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them)
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + FOOTER + hashlib.sha256(body).digest()


def save_checkpoint(path: str, ckpt: Checkpoint):
    blob = _encode(ckpt)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise IntegrityError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise IntegrityError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 4 + 4 + len(FOOTER) + 32:
        raise IntegrityError(f"{path}: too short to be a checkpoint")
    body, footer = blob[:-36], blob[-36:]
    if footer[:4] != FOOTER:
        raise IntegrityError(f"{path}: missing end marker (file truncated?)")
    if hashlib.sha256(body).digest() != footer[4:]:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupt")
    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise IntegrityError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    config_text = r.take(r.u32()).decode("utf-8")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = 1
        for d in dims:
            count *= d
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()  # writable, native layout
    if r.pos != len(body):
        raise IntegrityError(f"{path}: {len(body) - r.pos} trailing bytes after tensor table")
    return Checkpoint(config_text=config_text, meta=meta, tensors=tensors)


def tensor_table_checksum(tensors: dict[str, np.ndarray]) -> str:
    """Order-independent digest of a named tensor table."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()


def rng_state_to_meta(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_meta(state: dict) -> np.random.Generator:
    kind = state.get("bit_generator")
    if kind != "PCG64":
        raise IntegrityError(f"unsupported RNG kind in checkpoint: {kind!r}")
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
