"""Shared test utilities: toy model builders, independent reference
implementations, and bit-level float comparison."""

from __future__ import annotations

import random
import re

import numpy as np

from surgeon.tokenizer import BYTE_TO_UNIT, TokenizerModel

# -- toy tokenizer models -----------------------------------------------------


def byte_vocab() -> dict[str, int]:
    return {BYTE_TO_UNIT[i]: i for i in range(256)}


def byte_model(added: dict[str, int] | None = None, special: dict[str, str] | None = None) -> TokenizerModel:
    return TokenizerModel(vocab=byte_vocab(), added_tokens=added or {}, special=special or {})


def random_bpe_model(rng: random.Random, alphabet: bytes = b"ab ", max_merges: int = 8) -> TokenizerModel:
    """Byte-complete model with a training-style merge cascade: every merge
    combines pieces that already exist, so merge ranks respect creation
    order (the class of models real BPE training produces)."""
    vocab = byte_vocab()
    pieces = [BYTE_TO_UNIT[b] for b in alphabet]
    merges: list[tuple[str, str]] = []
    next_id = 256
    for _ in range(max_merges):
        left, right = rng.choice(pieces), rng.choice(pieces)
        cat = left + right
        if cat in vocab:
            continue
        merges.append((left, right))
        vocab[cat] = next_id
        next_id += 1
        pieces.append(cat)
    return TokenizerModel(vocab=vocab, merges=merges)


# -- independent reference encoder --------------------------------------------

_REF_PRESPLIT = re.compile(r"\s*\S+|\s+")


def _min_rank_merge(units: list[str], ranks: dict[tuple[str, str], int]) -> list[str]:
    """Priority-queue style simulation: repeatedly merge the single
    lowest-ranked adjacent pair (leftmost occurrence first)."""
    pieces = list(units)
    while True:
        best_rank = None
        best_i = None
        for i in range(len(pieces) - 1):
            rank = ranks.get((pieces[i], pieces[i + 1]))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank, best_i = rank, i
        if best_i is None:
            return pieces
        pieces[best_i : best_i + 2] = [pieces[best_i] + pieces[best_i + 1]]


def reference_encode(model: TokenizerModel, text: str) -> list[int]:
    """From-scratch re-implementation of the encode contract, sharing only
    the byte table constant with the production code."""
    ranks: dict[tuple[str, str], int] = {}
    for i, pair in enumerate(model.merges):
        ranks.setdefault(pair, i)
    surfaces = sorted(model.added_tokens, key=len, reverse=True)

    segments: list[tuple[bool, object]] = []
    buf = []
    i = 0
    while i < len(text):
        hit = None
        for s in surfaces:
            if text.startswith(s, i):
                hit = s
                break
        if hit is None:
            buf.append(text[i])
            i += 1
            continue
        if buf:
            segments.append((False, "".join(buf)))
            buf = []
        segments.append((True, model.added_tokens[hit]))
        i += len(hit)
    if buf:
        segments.append((False, "".join(buf)))

    ids: list[int] = []
    for is_added, payload in segments:
        if is_added:
            ids.append(payload)
            continue
        for pretoken in _REF_PRESPLIT.findall(payload):
            units = [BYTE_TO_UNIT[b] for b in pretoken.encode("utf-8")]
            ids.extend(model.vocab[p] for p in _min_rank_merge(units, ranks))
    return ids


# -- random text --------------------------------------------------------------

_CODEPOINT_POOLS = (
    (0x20, 0x7E),      # ascii
    (0x600, 0x6FF),    # arabic
    (0x4E00, 0x4E80),  # cjk slice
    (0x1F600, 0x1F64F),  # emoji
    (0x0300, 0x0340),  # combining marks
    (0x9, 0xD),        # control whitespace
)


def random_unicode_string(rng: random.Random, max_len: int = 30) -> str:
    n = rng.randrange(max_len + 1)
    chars = []
    for _ in range(n):
        lo, hi = _CODEPOINT_POOLS[rng.randrange(len(_CODEPOINT_POOLS))]
        chars.append(chr(rng.randint(lo, hi)))
    return "".join(chars)


# -- bit-level float comparison -----------------------------------------------

_BITS = {"f32": ("<u4", 32), "f16": ("<u2", 16), "bf16": ("<u2", 16)}


def _ordered(bits: np.ndarray, width: int) -> np.ndarray:
    sign = 1 << (width - 1)
    bits = bits.astype(np.int64)
    return np.where(bits < sign, bits + sign, 2 * sign - 1 - bits)


def ulp_distance(raw_a: bytes, raw_b: bytes, dtype: str) -> np.ndarray:
    """Distance in representable steps between two raw tensors of the same
    dtype. Equal values (including +0 vs -0) are distance 0."""
    from surgeon.tensorstore import widen

    kind, width = _BITS[dtype]
    a = np.frombuffer(raw_a, dtype=kind)
    b = np.frombuffer(raw_b, dtype=kind)
    dist = np.abs(_ordered(a, width) - _ordered(b, width))
    same_value = widen(raw_a, dtype) == widen(raw_b, dtype)  # catches +0 == -0
    return np.where(same_value, 0, dist)
