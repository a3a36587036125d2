"""Vocabulary injection: fold candidate pieces into an existing BPE model.

Candidates that already round-trip to a single id under the base model are
dropped (they would buy nothing), as are repeats of earlier kept pieces.
Survivors become added tokens with contiguous ids starting at the base
model's total size, in candidate order. The base vocab and merges are never
touched, so every old id keeps its meaning.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .tokenizer import TokenizerModel


@dataclass
class CandidatePieceList:
    """Ordered candidate surfaces, optionally scored.

    Scores ride along into the report but never influence the merge. The raw
    order (duplicates included) is preserved; first occurrence wins when the
    same piece appears twice.
    """

    pieces: list[str]
    scores: list[float] | None = None

    def __post_init__(self) -> None:
        for piece in self.pieces:
            if not piece:
                raise ValueError("candidate pieces must be non-empty strings")
        if self.scores is not None and len(self.scores) != len(self.pieces):
            raise ValueError("scores length must match pieces length")

    @classmethod
    def from_file(cls, path: str | Path) -> "CandidatePieceList":
        """One piece per line; an optional tab-separated score after it."""
        pieces: list[str] = []
        scores: list[float] = []
        saw_score = False
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            piece, sep, score = line.partition("\t")
            pieces.append(piece)
            if sep:
                saw_score = True
                scores.append(float(score))
            else:
                scores.append(0.0)
        return cls(pieces=pieces, scores=scores if saw_score else None)


@dataclass
class InjectionReport:
    candidates: int
    discarded_single_token: int
    discarded_duplicate: int
    v_old: int
    v_new: int
    new_tokens: list[dict] = field(default_factory=list)  # {"id", "content", ("score")}

    @property
    def net_new(self) -> int:
        return len(self.new_tokens)

    @property
    def new_token_ids(self) -> list[int]:
        return [entry["id"] for entry in self.new_tokens]

    def to_dict(self) -> dict:
        return {
            "candidates": self.candidates,
            "discarded_single_token": self.discarded_single_token,
            "discarded_duplicate": self.discarded_duplicate,
            "net_new": self.net_new,
            "v_old": self.v_old,
            "v_new": self.v_new,
            "new_token_ids": self.new_token_ids,
            "new_tokens": self.new_tokens,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InjectionReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            candidates=data["candidates"],
            discarded_single_token=data["discarded_single_token"],
            discarded_duplicate=data["discarded_duplicate"],
            v_old=data["v_old"],
            v_new=data["v_new"],
            new_tokens=data["new_tokens"],
        )


def roundtrip_single(base: TokenizerModel, piece: str) -> bool:
    """True when the base model already encodes ``piece`` as exactly one id."""
    if not piece:
        raise ValueError("piece must be non-empty")
    return len(base.encode(piece)) == 1


def dedup_merge(base: TokenizerModel, candidates: CandidatePieceList) -> tuple[TokenizerModel, InjectionReport]:
    """Inject ``candidates`` into ``base``; returns the extended model and a
    report whose counts always satisfy
    candidates == net_new + discarded_single_token + discarded_duplicate.

    A candidate colliding with a declared special token string is an error:
    silently keeping or dropping it would either shadow the special or hide
    a data problem.
    """
    special_surfaces = set(base.special.values())
    v_old = base.total_size

    kept: dict[str, int] = {}
    kept_scores: dict[str, float] = {}
    single = 0
    dup = 0
    scores = candidates.scores
    for idx, piece in enumerate(candidates.pieces):
        if piece in special_surfaces:
            raise ValueError(f"candidate {piece!r} collides with a special token")
        if piece in kept:
            dup += 1
            continue
        if len(base.encode(piece)) == 1:
            single += 1
            continue
        kept[piece] = v_old + len(kept)
        if scores is not None:
            kept_scores[piece] = scores[idx]

    added = dict(base.added_tokens)
    added.update(kept)
    extended = TokenizerModel(
        vocab=base.vocab,
        merges=base.merges,
        added_tokens=added,
        special=base.special,
    )

    new_tokens = []
    for piece, tid in kept.items():
        entry: dict = {"id": tid, "content": piece}
        if scores is not None:
            entry["score"] = kept_scores[piece]
        new_tokens.append(entry)

    report = InjectionReport(
        candidates=len(candidates.pieces),
        discarded_single_token=single,
        discarded_duplicate=dup,
        v_old=v_old,
        v_new=v_old + len(kept),
        new_tokens=new_tokens,
    )
    return extended, report
