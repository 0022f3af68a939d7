"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    "CMOE" | u32 version | u32 section_count
    per section: u32 name_len | name (utf-8) | u64 payload_len | payload

Text sections ("config", "meta") hold UTF-8 ``key = value`` lines. Parameter
sections ("partition", "moe") hold::

    u32 record_count
    per record: u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 values
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from conceptmoe.errors import FormatError

MAGIC = b"CMOE"
VERSION = 1
MOMENTUM_SUFFIX = "#momentum"


def encode_params(params: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes, what: str):
        self.raw = raw
        self.off = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.off + n > len(self.raw):
            raise FormatError(f"{self.what}: truncated (wanted {n} bytes at offset {self.off})")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode()
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: invalid utf-8 name") from None


def decode_params(payload: bytes, what: str = "parameters") -> dict[str, np.ndarray]:
    r = _Reader(payload, what)
    (count,) = r.unpack("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.text()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.off != len(payload):
        raise FormatError(f"{what}: {len(payload) - r.off} trailing bytes")
    return out


def encode_text(entries: dict[str, str]) -> bytes:
    return "".join(f"{k} = {v}\n" for k, v in entries.items()).encode()


def decode_text(payload: bytes) -> dict[str, str]:
    out = {}
    for line in payload.decode().splitlines():
        if line.strip():
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


@dataclass
class Checkpoint:
    config: dict[str, str]
    meta: dict[str, str] = field(default_factory=dict)
    partition: dict[str, np.ndarray] | None = None
    moe: dict[str, np.ndarray] | None = None
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    sections = [("config", encode_text(ckpt.config)), ("meta", encode_text(ckpt.meta))]
    if ckpt.partition is not None:
        sections.append(("partition", encode_params(ckpt.partition)))
    if ckpt.moe is not None:
        sections.append(("moe", encode_params(ckpt.moe)))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(sections)))
    for name, payload in sections:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, str(path))
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, not a checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    sections: dict[str, bytes] = {}
    for _ in range(count):
        name = r.text()
        (size,) = r.unpack("<Q")
        sections[name] = r.take(size)
    if r.off != len(raw):
        raise FormatError(f"{path}: trailing bytes after last section")
    if "config" not in sections:
        raise FormatError(f"{path}: missing config section")
    try:
        config = decode_text(sections["config"])
        meta = decode_text(sections.get("meta", b""))
    except UnicodeDecodeError:
        raise FormatError(f"{path}: corrupt text section") from None
    part = decode_params(sections["partition"], "partition") if "partition" in sections else None
    moe = decode_params(sections["moe"], "moe") if "moe" in sections else None
    return Checkpoint(config, meta, part, moe, version)
