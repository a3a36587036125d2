"""Flat tensor container, compatible with the widely used safetensors layout.

File layout: an 8-byte little-endian u64 header length, a JSON header mapping
tensor name -> {dtype, shape, data_offsets}, then the raw little-endian tensor
bytes. Offsets are relative to the end of the header; data regions must tile
the byte section exactly, in order, with no gaps or overlaps. Insertion order
is preserved on write, so serialization is deterministic.

Supported dtypes are f32, f16 and bf16. Widening to f32 is exact; narrowing
rounds to nearest, ties to even. NaN payloads survive the round trip.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPES = ("f32", "f16", "bf16")
_WIDTH = {"f32": 4, "f16": 2, "bf16": 2}
_CONTAINER_NAME = {"f32": "F32", "f16": "F16", "bf16": "BF16"}
_FROM_CONTAINER = {v: k for k, v in _CONTAINER_NAME.items()}
_FROM_CONTAINER.update({k: k for k in DTYPES})


def dtype_width(dtype: str) -> int:
    if dtype not in _WIDTH:
        raise ValueError(f"unknown dtype {dtype!r}")
    return _WIDTH[dtype]


def _bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << 16).view(np.float32)


def _f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(values, dtype="<f4").view(np.uint32)
    mantissa = bits & 0x007FFFFF
    is_nan = ((bits & 0x7F800000) == 0x7F800000) & (mantissa != 0)
    lsb = (bits >> 16) & 1
    out = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    if is_nan.any():
        # keep the high mantissa bits; if they all sit below the cut, force
        # the quiet bit so NaN does not collapse to infinity
        kept = (bits[is_nan] >> 16).astype(np.uint16)
        kept |= np.where((kept & 0x7F) == 0, np.uint16(0x40), np.uint16(0))
        out[is_nan] = kept
    return out


def widen(data: bytes, dtype: str) -> np.ndarray:
    """Raw little-endian ``dtype`` bytes -> float32 array (exact)."""
    if dtype == "f32":
        return np.frombuffer(data, dtype="<f4").copy()
    if dtype == "f16":
        return np.frombuffer(data, dtype="<f2").astype(np.float32)
    if dtype == "bf16":
        return _bf16_bits_to_f32(np.frombuffer(data, dtype="<u2"))
    raise ValueError(f"unknown dtype {dtype!r}")


def narrow(values: np.ndarray, dtype: str) -> bytes:
    """Float array -> raw little-endian ``dtype`` bytes, rounding to nearest
    even. Input is taken through float32 first, which is exact for values
    that started as float32."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if dtype == "f32":
        return values.tobytes()
    if dtype == "f16":
        with np.errstate(over="ignore"):  # values past f16 max round to inf
            return values.astype("<f2").tobytes()
    if dtype == "bf16":
        return _f32_to_bf16_bits(values).astype("<u2").tobytes()
    raise ValueError(f"unknown dtype {dtype!r}")


@dataclass(frozen=True)
class TensorRecord:
    dtype: str
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if self.dtype not in _WIDTH:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if len(self.shape) == 0:
            raise ValueError("rank-0 tensors are not allowed")
        if any(extent < 1 for extent in self.shape):
            raise ValueError(f"shape extents must be >= 1, got {self.shape}")
        expected = self.element_count * _WIDTH[self.dtype]
        if len(self.data) != expected:
            raise ValueError(
                f"data length {len(self.data)} does not match shape {self.shape} "
                f"dtype {self.dtype} (expected {expected})"
            )

    @property
    def element_count(self) -> int:
        n = 1
        for extent in self.shape:
            n *= extent
        return n

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def to_float32(self) -> np.ndarray:
        return widen(self.data, self.dtype).reshape(self.shape)

    @classmethod
    def from_float32(cls, values: np.ndarray, dtype: str) -> "TensorRecord":
        values = np.asarray(values)
        return cls(dtype=dtype, shape=tuple(values.shape), data=narrow(values, dtype))


@dataclass
class TensorStore:
    """Named tensors in insertion order plus free-form string metadata."""

    tensors: dict[str, TensorRecord] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> TensorRecord:
        if name not in self.tensors:
            raise ValueError(f"missing tensor {name!r}")
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors.keys())


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ValueError(f"duplicate tensor name {key!r} in header")
        seen[key] = value
    return seen


def read_store(path: str | Path) -> TensorStore:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated container (no header length)")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise ValueError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path}: header is not valid UTF-8: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ValueError(f"{path}: header must be a JSON object")
    body = blob[8 + header_len :]

    metadata = header.pop("__metadata__", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ValueError(f"{path}: __metadata__ must map strings to strings")

    tensors: dict[str, TensorRecord] = {}
    regions: list[tuple[int, int, str]] = []
    for name, desc in header.items():
        if not isinstance(desc, dict):
            raise ValueError(f"{path}: tensor {name!r} entry must be an object")
        dtype_name = desc.get("dtype")
        if dtype_name not in _FROM_CONTAINER:
            raise ValueError(f"{path}: tensor {name!r} has unknown dtype {dtype_name!r}")
        dtype = _FROM_CONTAINER[dtype_name]
        shape = desc.get("shape")
        if not isinstance(shape, list) or not all(isinstance(e, int) for e in shape):
            raise ValueError(f"{path}: tensor {name!r} has malformed shape {shape!r}")
        offsets = desc.get("data_offsets")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)
        ):
            raise ValueError(f"{path}: tensor {name!r} has malformed data_offsets")
        begin, end = offsets
        if begin < 0 or end < begin or end > len(body):
            raise ValueError(f"{path}: tensor {name!r} offsets [{begin}, {end}) out of range")
        tensors[name] = TensorRecord(dtype=dtype, shape=tuple(shape), data=body[begin:end])
        regions.append((begin, end, name))

    cursor = 0
    for begin, end, name in sorted(regions):
        if begin != cursor:
            raise ValueError(
                f"{path}: tensor {name!r} region [{begin}, {end}) overlaps or leaves a gap "
                f"(expected to start at {cursor})"
            )
        cursor = end
    if cursor != len(body):
        raise ValueError(f"{path}: {len(body) - cursor} trailing bytes after last tensor")
    return TensorStore(tensors=tensors, metadata=dict(metadata))


def write_store(store: TensorStore, path: str | Path) -> None:
    header: dict = {}
    if store.metadata:
        header["__metadata__"] = dict(store.metadata)
    offset = 0
    chunks: list[bytes] = []
    for name, record in store.tensors.items():
        end = offset + record.nbytes
        header[name] = {
            "dtype": _CONTAINER_NAME[record.dtype],
            "shape": list(record.shape),
            "data_offsets": [offset, end],
        }
        chunks.append(record.data)
        offset = end
    payload = json.dumps(header, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    payload += b" " * (-len(payload) % 8)  # 8-align the body, matching common writers
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for chunk in chunks:
            fh.write(chunk)
