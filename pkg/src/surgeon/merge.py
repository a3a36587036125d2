"""Checkpoint merging: linear, spherical and multi-way weighted averaging.

All three operate tensor-by-tensor on stores with identical names, shapes
and dtypes. Elements are widened to float32, combined, and narrowed back to
the storage dtype. Linear combinations are clamped to the elementwise
operand envelope: the mathematical result always lies inside it, and the
clamp stops the final rounding from poking one ulp outside. Slerp follows
the spherical path, so no clamp there.

Endpoint coefficients (t of exactly 0 or 1, a soup that collapses to one
operand) copy the operand verbatim instead of multiplying by 1.0, keeping
the identities bit-exact even for negative zero and NaN payloads.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorstore import TensorRecord, TensorStore, read_store, write_store


def _check_aligned(stores: list[TensorStore]) -> None:
    first = stores[0]
    names = first.names()
    for other in stores[1:]:
        if other.names() != names:
            missing = set(names) ^ set(other.names())
            if missing:
                raise ValueError(f"stores disagree on tensor names: {sorted(missing)}")
            raise ValueError("stores list the same tensors in different orders")
        for name in names:
            a, b = first.tensors[name], other.tensors[name]
            if a.shape != b.shape:
                raise ValueError(f"tensor {name!r}: shape {a.shape} vs {b.shape}")
            if a.dtype != b.dtype:
                raise ValueError(f"tensor {name!r}: dtype {a.dtype} vs {b.dtype}")


def _weighted_record(records: list[TensorRecord], weights: list[float]) -> TensorRecord:
    live = [(r, w) for r, w in zip(records, weights) if w != 0.0]
    if len(live) == 1 and live[0][1] == 1.0:
        return live[0][0]
    arrays = [r.to_float32() for r, _ in live]
    # operands widen exactly; the weighted sum runs in float64 so the single
    # float32 rounding below dominates the error (letting numpy fold the
    # float weights to f32 first would cost an extra ulp)
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for arr, (_, w) in zip(arrays, live):
        acc += arr.astype(np.float64) * w
    out = acc.astype(np.float32)
    lo = arrays[0]
    hi = arrays[0]
    for arr in arrays[1:]:
        lo = np.minimum(lo, arr)
        hi = np.maximum(hi, arr)
    out = np.minimum(np.maximum(out, lo), hi)
    return TensorRecord.from_float32(out, records[0].dtype)


def lerp(a: TensorStore, b: TensorStore, t: float) -> TensorStore:
    """Elementwise (1-t)*a + t*b over widened operands, narrowed once to the
    storage dtype."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    _check_aligned([a, b])
    out: dict[str, TensorRecord] = {}
    for name, ra in a.tensors.items():
        rb = b.tensors[name]
        if t == 0.0:
            out[name] = ra
        elif t == 1.0:
            out[name] = rb
        else:
            out[name] = _weighted_record([ra, rb], [1.0 - t, t])
    return TensorStore(tensors=out, metadata={"merge_method": "lerp", "merge_t": repr(t)})


def slerp(a: TensorStore, b: TensorStore, t: float, eps: float = 1e-6) -> TensorStore:
    """Spherical interpolation over each tensor flattened to one vector.
    Angles and norms are computed in float64; near-colinear or zero-norm
    tensors fall back to lerp."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    _check_aligned([a, b])
    out: dict[str, TensorRecord] = {}
    for name, ra in a.tensors.items():
        rb = b.tensors[name]
        if t == 0.0:
            out[name] = ra
            continue
        if t == 1.0:
            out[name] = rb
            continue
        va = ra.to_float32().ravel()
        vb = rb.to_float32().ravel()
        norm_a = float(np.linalg.norm(va.astype(np.float64)))
        norm_b = float(np.linalg.norm(vb.astype(np.float64)))
        if norm_a == 0.0 or norm_b == 0.0:
            warnings.warn(f"tensor {name!r} has zero norm; falling back to lerp", stacklevel=2)
            out[name] = _weighted_record([ra, rb], [1.0 - t, t])
            continue
        cos_omega = float(np.dot(va.astype(np.float64), vb.astype(np.float64))) / (norm_a * norm_b)
        cos_omega = max(-1.0, min(1.0, cos_omega))
        omega = math.acos(cos_omega)
        sin_omega = math.sin(omega)
        if sin_omega < eps:
            warnings.warn(
                f"tensor {name!r} is near-colinear (sin omega {sin_omega:.2e}); "
                "falling back to lerp",
                stacklevel=2,
            )
            out[name] = _weighted_record([ra, rb], [1.0 - t, t])
            continue
        ca = math.sin((1.0 - t) * omega) / sin_omega
        cb = math.sin(t * omega) / sin_omega
        combined = ra.to_float32() * ca + rb.to_float32() * cb
        out[name] = TensorRecord.from_float32(combined, ra.dtype)
    return TensorStore(tensors=out, metadata={"merge_method": "slerp", "merge_t": repr(t)})


def soup(stores: list[TensorStore], weights: list[float], tol: float = 1e-9) -> TensorStore:
    """Weighted average of any number of stores; weights must sum to one."""
    if len(stores) < 2:
        raise ValueError("soup needs at least two stores")
    if len(stores) != len(weights):
        raise ValueError(f"{len(stores)} stores but {len(weights)} weights")
    if abs(sum(weights) - 1.0) > tol:
        raise ValueError(f"weights sum to {sum(weights)!r}, expected 1.0")
    _check_aligned(stores)
    out: dict[str, TensorRecord] = {}
    for name in stores[0].names():
        out[name] = _weighted_record([s.tensors[name] for s in stores], weights)
    return TensorStore(
        tensors=out,
        metadata={"merge_method": "soup", "merge_weights": ",".join(repr(w) for w in weights)},
    )


# -- recipe runner -----------------------------------------------------------


def _format_coeff(value: float) -> str:
    return f"{value:g}"


@dataclass(frozen=True)
class MergeRecipe:
    method: str
    operands: tuple[str, ...]
    coefficients: float | tuple[float, ...]

    def __post_init__(self) -> None:
        if self.method not in ("lerp", "slerp", "soup"):
            raise ValueError(f"unknown merge method {self.method!r}")
        if self.method in ("lerp", "slerp"):
            if len(self.operands) != 2:
                raise ValueError(f"{self.method} takes two operands")
            if not isinstance(self.coefficients, float):
                raise ValueError(f"{self.method} takes a single coefficient t")
        else:
            if not isinstance(self.coefficients, tuple):
                raise ValueError("soup takes a weight list")
            if len(self.coefficients) != len(self.operands):
                raise ValueError("soup weight count must match operand count")

    @classmethod
    def from_dict(cls, data: dict) -> "MergeRecipe":
        method = data.get("method")
        operands = tuple(data.get("operands", ()))
        coeff = data.get("coefficients")
        if coeff is None:
            coeff = data.get("t") if method in ("lerp", "slerp") else data.get("weights")
        if coeff is None:
            raise ValueError(f"recipe {data!r} has no coefficients")
        if isinstance(coeff, (int, float)) and not isinstance(coeff, bool):
            coeff = float(coeff)
        elif isinstance(coeff, (list, tuple)):
            coeff = tuple(float(w) for w in coeff)
        else:
            raise ValueError(f"malformed coefficients {coeff!r}")
        return cls(method=method, operands=operands, coefficients=coeff)

    @property
    def name(self) -> str:
        labels = "_".join(Path(op).stem for op in self.operands)
        if self.method in ("lerp", "slerp"):
            return f"{self.method}_{labels}_t{_format_coeff(self.coefficients)}"
        joined = "-".join(_format_coeff(w) for w in self.coefficients)
        return f"soup_{labels}_{joined}"


def load_recipes(path: str | Path) -> list[MergeRecipe]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: recipe file must be a JSON array")
    return [MergeRecipe.from_dict(entry) for entry in data]


def run_recipes(recipes: list[MergeRecipe], out_dir: str | Path) -> dict[str, str]:
    """Execute every recipe, writing ``<canonical-name>.safetensors`` files
    and a ``manifest.json`` mapping recipe names to file names. Operand
    stores are loaded once and shared across recipes."""
    if not recipes:
        raise ValueError("empty recipe list")
    names = [r.name for r in recipes]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ValueError(f"duplicate recipe names: {sorted(dupes)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache: dict[str, TensorStore] = {}

    def load(op: str) -> TensorStore:
        if op not in cache:
            cache[op] = read_store(op)
        return cache[op]

    manifest: dict[str, str] = {}
    for recipe in recipes:
        operands = [load(op) for op in recipe.operands]
        if recipe.method == "lerp":
            merged = lerp(operands[0], operands[1], recipe.coefficients)
        elif recipe.method == "slerp":
            merged = slerp(operands[0], operands[1], recipe.coefficients)
        else:
            merged = soup(operands, list(recipe.coefficients))
        merged.metadata["merge_recipe"] = recipe.name
        filename = f"{recipe.name}.safetensors"
        write_store(merged, out_dir / filename)
        manifest[recipe.name] = filename
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest
