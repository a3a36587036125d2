"""Static quantization footprint estimates from a shape manifest.

No weights are read: the estimate only needs tensor names and shapes. Every
tensor gets the scheme's nominal bits-per-weight unless its name matches an
exemption pattern or its quantized dimension is not divisible by the block
size, in which case it gets the fallback width. Bit totals are accumulated
as exact rationals, so reports are additive to the last bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fnmatch import fnmatchcase
from fractions import Fraction
from pathlib import Path
from typing import Sequence

REASON_NOMINAL = "nominal"
REASON_MISALIGNED = "misaligned"
REASON_EXEMPT = "exempt"


@dataclass(frozen=True)
class QuantScheme:
    name: str
    nominal_bpw: float
    block_size: int
    fallback_bpw: float
    exempt_names: tuple[str, ...] = ()
    quantized_dim: str = "last"

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.nominal_bpw <= 0 or self.fallback_bpw <= 0:
            raise ValueError("bits-per-weight must be positive")
        if self.nominal_bpw > self.fallback_bpw:
            raise ValueError("nominal_bpw must not exceed fallback_bpw")
        if self.quantized_dim not in ("last", "first"):
            raise ValueError(f"quantized_dim must be 'last' or 'first', got {self.quantized_dim!r}")

    @classmethod
    def from_json(cls, path: str | Path) -> "QuantScheme":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            name=data["name"],
            nominal_bpw=float(data["nominal_bpw"]),
            block_size=int(data["block_size"]),
            fallback_bpw=float(data["fallback_bpw"]),
            exempt_names=tuple(data.get("exempt_names", ())),
            quantized_dim=data.get("quantized_dim", "last"),
        )


@dataclass(frozen=True)
class TensorAssignment:
    name: str
    params: int
    assigned_bpw: float
    reason: str


@dataclass
class FootprintReport:
    scheme: str
    assignments: list[TensorAssignment]
    total_params: int
    total_bits: Fraction
    per_tensor_overhead_bytes: int = 0

    @property
    def effective_bpw(self) -> float:
        return float(self.total_bits / self.total_params)

    @property
    def total_bytes(self) -> float:
        return float(self.total_bits) / 8.0 + self.per_tensor_overhead_bytes * len(self.assignments)

    @property
    def fallback_tensor_count(self) -> int:
        return sum(1 for a in self.assignments if a.reason != REASON_NOMINAL)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "total_params": self.total_params,
            "total_bits": float(self.total_bits),
            "total_bytes": self.total_bytes,
            "effective_bpw": self.effective_bpw,
            "fallback_tensor_count": self.fallback_tensor_count,
            "tensors": [
                {
                    "name": a.name,
                    "params": a.params,
                    "assigned_bpw": a.assigned_bpw,
                    "reason": a.reason,
                }
                for a in self.assignments
            ],
        }


def load_manifest(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    """Manifest format: JSON array of {name, shape} objects, as emitted by
    ``surgeon tensors ls --json``. Extra keys are ignored."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    out = []
    for entry in data:
        if not isinstance(entry, dict) or "name" not in entry or "shape" not in entry:
            raise ValueError(f"{path}: malformed manifest entry {entry!r}")
        out.append((entry["name"], tuple(int(e) for e in entry["shape"])))
    return out


def estimate(
    manifest: Sequence[tuple[str, Sequence[int]]],
    scheme: QuantScheme,
    per_tensor_overhead_bytes: int = 0,
) -> FootprintReport:
    """Assign a bit width to every tensor and accumulate exact totals."""
    if not manifest:
        raise ValueError("empty manifest")
    nominal = Fraction(scheme.nominal_bpw)
    fallback = Fraction(scheme.fallback_bpw)
    assignments: list[TensorAssignment] = []
    total_params = 0
    total_bits = Fraction(0)
    for name, shape in manifest:
        if len(shape) == 0:
            raise ValueError(f"tensor {name!r} has an empty shape")
        if any(e < 1 for e in shape):
            raise ValueError(f"tensor {name!r} has non-positive extent in shape {tuple(shape)}")
        params = 1
        for extent in shape:
            params *= extent
        quant_extent = shape[-1] if scheme.quantized_dim == "last" else shape[0]
        if any(fnmatchcase(name, pattern) for pattern in scheme.exempt_names):
            bpw, reason = fallback, REASON_EXEMPT
        elif quant_extent % scheme.block_size != 0:
            bpw, reason = fallback, REASON_MISALIGNED
        else:
            bpw, reason = nominal, REASON_NOMINAL
        assignments.append(
            TensorAssignment(name=name, params=params, assigned_bpw=float(bpw), reason=reason)
        )
        total_params += params
        total_bits += bpw * params
    return FootprintReport(
        scheme=scheme.name,
        assignments=assignments,
        total_params=total_params,
        total_bits=total_bits,
        per_tensor_overhead_bytes=per_tensor_overhead_bytes,
    )
