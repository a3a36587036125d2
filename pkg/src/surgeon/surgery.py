"""Embedding-matrix surgery for a grown vocabulary.

``resize_embeddings`` widens the embedding (and head, when untied) to the new
row count with zero-filled tails; ``mean_subtoken_init`` then overwrites each
new row with the mean of the base-tokenizer decomposition of its surface.
Old rows are carried over byte-for-byte: they are never round-tripped through
a float conversion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensorstore import TensorRecord, TensorStore, dtype_width, narrow
from .tokenizer import TokenizerModel


@dataclass(frozen=True)
class SurgeryPlan:
    embed_tensor_name: str
    v_old: int
    v_new: int
    hidden_dim: int
    unk_id: int
    head_tensor_name: str | None = None

    def __post_init__(self) -> None:
        if self.v_new <= self.v_old:
            raise ValueError(f"v_new ({self.v_new}) must exceed v_old ({self.v_old})")
        if not (0 <= self.unk_id < self.v_old):
            raise ValueError(f"unk_id {self.unk_id} outside [0, {self.v_old})")


def detect_tied(store: TensorStore, plan: SurgeryPlan) -> bool:
    """Tied head means: no separate head tensor to maintain. Structural only,
    no numeric comparison."""
    name = plan.head_tensor_name
    if name is None or name not in store:
        return True
    head = store.tensors[name]
    embed = store[plan.embed_tensor_name]
    if head.shape != embed.shape:
        warnings.warn(
            f"head tensor {name!r} shape {head.shape} does not match embedding "
            f"shape {embed.shape}",
            stacklevel=2,
        )
    return False


def _grown(record: TensorRecord, plan: SurgeryPlan, what: str) -> TensorRecord:
    expected = (plan.v_old, plan.hidden_dim)
    if record.shape != expected:
        raise ValueError(f"{what} shape {record.shape} does not match plan {expected}")
    row_bytes = plan.hidden_dim * dtype_width(record.dtype)
    tail = bytes(row_bytes * (plan.v_new - plan.v_old))
    return TensorRecord(
        dtype=record.dtype,
        shape=(plan.v_new, plan.hidden_dim),
        data=record.data + tail,
    )


def resize_embeddings(store: TensorStore, plan: SurgeryPlan) -> TensorStore:
    """Grow the embedding (and untied head) to ``v_new`` rows, zero-filling
    the new tail. Existing rows are copied verbatim."""
    out = dict(store.tensors)
    out[plan.embed_tensor_name] = _grown(store[plan.embed_tensor_name], plan, "embedding")
    if plan.head_tensor_name is not None and plan.head_tensor_name in store:
        # absent head means the checkpoint ties it to the embedding
        out[plan.head_tensor_name] = _grown(store[plan.head_tensor_name], plan, "head")
    return TensorStore(tensors=out, metadata=dict(store.metadata))


def mean_subtoken_init(
    store: TensorStore,
    plan: SurgeryPlan,
    base: TokenizerModel,
    new_tokens: list[tuple[int, str]],
) -> TensorStore:
    """Initialize rows [v_old, v_new) as the mean of each surface's base
    decomposition, accumulated in float32 with one division, then narrowed
    to the storage dtype. Empty decompositions fall back to the unk row.

    ``new_tokens`` must cover exactly the ids [v_old, v_new); every surface
    must decompose into ids below ``v_old`` (anything else would read an
    uninitialized row).
    """
    ids_given = sorted(tid for tid, _ in new_tokens)
    if ids_given != list(range(plan.v_old, plan.v_new)):
        raise ValueError(f"new token ids must cover exactly [{plan.v_old}, {plan.v_new})")

    embed = store[plan.embed_tensor_name]
    if embed.shape != (plan.v_new, plan.hidden_dim):
        raise ValueError(
            f"embedding shape {embed.shape} does not match resized plan "
            f"({plan.v_new}, {plan.hidden_dim}); run resize_embeddings first"
        )

    old_rows = embed.to_float32()[: plan.v_old]  # frozen f32 view of the pre-surgery table
    fresh = np.zeros((plan.v_new - plan.v_old, plan.hidden_dim), dtype=np.float32)
    for tid, surface in new_tokens:
        ids = base.encode(surface)
        if not ids:
            ids = [plan.unk_id]
        for sub in ids:
            if sub >= plan.v_old:
                raise ValueError(
                    f"surface {surface!r} encodes to id {sub} >= v_old {plan.v_old}; "
                    "decompose against the pre-injection tokenizer"
                )
        rows = old_rows[ids]
        mean = rows.sum(axis=0, dtype=np.float32) / np.float32(len(ids))
        fresh[tid - plan.v_old] = mean

    row_bytes = plan.hidden_dim * dtype_width(embed.dtype)
    new_block = narrow(fresh, embed.dtype)
    data = embed.data[: plan.v_old * row_bytes] + new_block

    out = dict(store.tensors)
    out[plan.embed_tensor_name] = TensorRecord(dtype=embed.dtype, shape=embed.shape, data=data)

    if plan.head_tensor_name is not None and not detect_tied(store, plan):
        head = store[plan.head_tensor_name]
        if head.shape != (plan.v_new, plan.hidden_dim):
            raise ValueError(
                f"head shape {head.shape} does not match resized plan "
                f"({plan.v_new}, {plan.hidden_dim}); run resize_embeddings first"
            )
        if head.dtype != embed.dtype:
            raise ValueError("head and embedding dtypes must match for shared row init")
        out[plan.head_tensor_name] = TensorRecord(
            dtype=head.dtype,
            shape=head.shape,
            data=head.data[: plan.v_old * row_bytes] + new_block,
        )
    return TensorStore(tensors=out, metadata=dict(store.metadata))
