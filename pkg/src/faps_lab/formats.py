"""Binary formats: FPK1 feature files and AVN1/VCL1 checkpoints (little-endian)."""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .sequence import AVENET, AVERAGE, RAW, FeatureSequence

FPK_MAGIC = b"FPK1"
FPK_VERSION = 1
_FPK_HEADER = struct.Struct("<4sHIIB")
_PROVENANCE_CODES = {RAW: 0, AVENET: 1, AVERAGE: 2}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE_CODES.items()}

CHECKPOINT_VERSION = 1
_LE_F32 = np.dtype("<f4")
_MAX_RANK = 8


class FormatError(ValueError):
    pass


def encode_feature_bytes(seq: FeatureSequence) -> bytes:
    T, D = seq.shape
    header = _FPK_HEADER.pack(FPK_MAGIC, FPK_VERSION, T, D, _PROVENANCE_CODES[seq.provenance])
    return header + np.ascontiguousarray(seq.values, dtype=_LE_F32).tobytes()


def decode_feature_bytes(data: bytes, source: str = "<bytes>") -> FeatureSequence:
    if len(data) < _FPK_HEADER.size:
        raise FormatError(f"{source}: file too short for an FPK1 header")
    magic, version, T, D, prov = _FPK_HEADER.unpack_from(data)
    if magic != FPK_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != FPK_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if prov not in _PROVENANCE_NAMES:
        raise FormatError(f"{source}: unknown provenance tag {prov}")
    expected = 4 * T * D
    payload = len(data) - _FPK_HEADER.size
    if payload != expected:
        raise FormatError(f"{source}: payload is {payload} bytes, expected {expected} for {T}x{D}")
    values = np.frombuffer(data, dtype=_LE_F32, offset=_FPK_HEADER.size).reshape(T, D)
    try:
        return FeatureSequence(values.astype(np.float32), _PROVENANCE_NAMES[prov])
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def write_feature_file(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(encode_feature_bytes(seq))


def read_feature_file(path) -> FeatureSequence:
    return decode_feature_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- checkpoints
#
# magic(4) version(u16) header_len(u32) header_json tensor_count(u32)
# then per tensor: name_len(u16) name rank(u8) dims(u32 * rank) float32 payload

def write_checkpoint(path, magic: bytes, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    body = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<HI", CHECKPOINT_VERSION, len(body)), body,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path, magic: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    data = Path(path).read_bytes()
    src = str(path)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{src}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != magic:
        raise FormatError(f"{src}: bad magic, expected {magic!r}")
    version, hlen = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{src}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{src}: corrupt header ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{src}: header is not a JSON object")
    (count,) = struct.unpack("<I", take(4))
    tensors = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1))
        if rank > _MAX_RANK:
            raise FormatError(f"{src}: tensor {name!r} has rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(dims)
        arr = np.frombuffer(take(4 * n), dtype=_LE_F32).reshape(dims).astype(np.float32)
        tensors.append((name, arr))
    if pos != len(data):
        raise FormatError(f"{src}: {len(data) - pos} trailing bytes")
    return header, tensors
