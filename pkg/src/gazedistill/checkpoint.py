"""Binary checkpoint format for trained parameter sets.

Layout: magic "GZLT", u32 version, u32 tensor count, then per tensor a
u16 name length, the UTF-8 name, u8 rank, rank u32 dims, and the float32
little-endian payload. An 8-byte trailer carries the CRC32 of all
payload bytes in written order. Records are sorted by name so identical
parameter sets serialize identically.

Run metadata (pipeline stage, seed, config hash) rides along as reserved
"__meta." tensors whose payloads are UTF-8 bytes widened to float32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"GZLT"
VERSION = 1
META_PREFIX = "__meta."
STAGES = ("teacher", "student")


@dataclass(frozen=True)
class CheckpointMeta:
    stage: str
    seed: int
    config_hash: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown checkpoint stage {self.stage!r}, expected one of {STAGES}")


def _text_tensor(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<f4")


def _tensor_text(data: np.ndarray, name: str) -> str:
    values = np.asarray(data).ravel()
    rounded = np.rint(values)
    bad = (np.abs(values - rounded) > 0) | (rounded < 0) | (rounded > 255)
    if bad.any():
        raise FormatError(f"metadata tensor {name} does not hold byte values")
    return bytes(rounded.astype(np.uint8)).decode("utf-8")


def save_checkpoint(path, params: dict, meta: CheckpointMeta) -> None:
    """Write named tensors plus metadata; accepts Tensors or arrays."""
    tensors = {}
    for name, value in params.items():
        if name.startswith(META_PREFIX):
            raise ConfigError(f"parameter name {name!r} collides with the metadata prefix")
        data = np.asarray(value.data if hasattr(value, "data") else value, dtype="<f4")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)  # keeps rank-0 as rank-0 when skipped
        tensors[name] = data
    tensors[META_PREFIX + "stage"] = _text_tensor(meta.stage)
    tensors[META_PREFIX + "seed"] = _text_tensor(str(int(meta.seed)))
    tensors[META_PREFIX + "config"] = _text_tensor(meta.config_hash)

    crc = 0
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        data = tensors[name]
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        raw = data.tobytes()
        crc = zlib.crc32(raw, crc)
        out.append(raw)
    out.append(struct.pack("<Q", crc))
    Path(path).write_bytes(b"".join(out))


def _take(blob: bytes, offset: int, size: int, what: str, path):
    if offset + size > len(blob):
        raise FormatError(f"{path}: truncated {what} at offset {offset}")
    return blob[offset : offset + size], offset + size


def load_checkpoint(path):
    """Read back (tensors, meta); tensors come out float32."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"missing checkpoint file {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0: {blob[:4]!r}")
    raw, offset = _take(blob, 4, 8, "header", path)
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")

    tensors = {}
    crc = 0
    for _ in range(count):
        raw, offset = _take(blob, offset, 2, "name length", path)
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _take(blob, offset, name_len, "name", path)
        name = raw.decode("utf-8")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        raw, offset = _take(blob, offset, 1, f"rank of {name}", path)
        rank = raw[0]
        raw, offset = _take(blob, offset, 4 * rank, f"dims of {name}", path)
        shape = struct.unpack(f"<{rank}I", raw)
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        raw, offset = _take(blob, offset, n_bytes, f"payload of {name}", path)
        crc = zlib.crc32(raw, crc)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    raw, offset = _take(blob, offset, 8, "checksum", path)
    (stored,) = struct.unpack("<Q", raw)
    if stored != crc:
        raise FormatError(f"{path}: checksum mismatch, stored {stored} computed {crc}")
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after checksum")

    meta_raw = {}
    for key in ("stage", "seed", "config"):
        name = META_PREFIX + key
        if name not in tensors:
            raise FormatError(f"{path}: missing metadata tensor {name}")
        meta_raw[key] = _tensor_text(tensors.pop(name), name)
    meta = CheckpointMeta(
        stage=meta_raw["stage"], seed=int(meta_raw["seed"]), config_hash=meta_raw["config"]
    )
    return tensors, meta


def require_stage(meta: CheckpointMeta, expected: str, path=None) -> None:
    if meta.stage != expected:
        where = f"{path}: " if path is not None else ""
        raise ConfigError(
            f"{where}checkpoint stage is {meta.stage!r} where {expected!r} is required"
        )


def require_config_hash(meta: CheckpointMeta, expected: str, path=None) -> None:
    if meta.config_hash != expected:
        where = f"{path}: " if path is not None else ""
        raise ConfigError(
            f"{where}checkpoint config hash {meta.config_hash} does not match "
            f"the active config {expected}"
        )


def check_tensor_names(tensors: dict, expected, path=None) -> None:
    """The loaded set must exactly cover the model's parameter names."""
    have = set(tensors)
    want = set(expected)
    where = f"{path}: " if path is not None else ""
    unknown = sorted(have - want)
    if unknown:
        raise FormatError(f"{where}unknown tensor name {unknown[0]!r}")
    missing = sorted(want - have)
    if missing:
        raise FormatError(f"{where}checkpoint is missing tensor {missing[0]!r}")
