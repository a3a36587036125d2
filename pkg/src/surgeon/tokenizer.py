"""Byte-level BPE tokenizer: loading, saving, encode/decode, fertility.

The model is the usual byte-level BPE triple (vocab, ranked merges, added
tokens). Encoding runs in three stages:

1. an added-token pre-pass scans the text left to right and takes the longest
   matching added-token surface at each position (plain codepoint matching,
   no regex involvement),
2. the remaining spans are split on whitespace, with whitespace attaching to
   the *following* word (a trailing whitespace run forms its own pretoken),
3. each pretoken is mapped to printable byte units and merged bottom-up by
   ascending merge rank.

Decoding inverts the byte mapping and is the exact inverse of encoding for
any input. Mixed streams of added and base tokens decode correctly because
the byte buffer is flushed at every added-token boundary.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

# Byte value -> printable unit, index = byte value. This is the standard
# 256-entry bijection used by byte-level BPE vocabularies: printable latin
# bytes map to themselves, everything else is remapped above U+0100. The
# test suite rebuilds it from the defining construction.
BYTE_TO_UNIT = (
    "ĀāĂăĄąĆćĈĉĊċ"
    "ČčĎďĐđĒēĔĕĖė"
    "ĘęĚěĜĝĞğĠ!\"#$%&'()*+,-./"
    "0123456789:;<=>?@ABCDEFGHIJKLMNOPQRSTUVWXYZ[\\]^_`abcdefghijklmnopqrstuvwxyz"
    "{|}~ġĢģĤĥĦħĨĩĪī"
    "ĬĭĮįİıĲĳĴĵĶķ"
    "ĸĹĺĻļĽľĿŀŁł"
    "¡¢£¤¥¦§¨©ª«¬"
    "Ń®¯°±²³´µ¶·¸"
    "¹º»¼½¾¿ÀÁÂÃÄ"
    "ÅÆÇÈÉÊËÌÍÎÏÐ"
    "ÑÒÓÔÕÖ×ØÙÚÛÜ"
    "ÝÞßàáâãäåæçè"
    "éêëìíîïðñòóô"
    "õö÷øùúûüýþÿ"
)

UNIT_TO_BYTE = {ch: i for i, ch in enumerate(BYTE_TO_UNIT)}

# Whitespace attaches to the following word; a trailing run of whitespace
# with no word after it becomes its own pretoken.
_PRETOKEN = re.compile(r"\s*\S+|\s+")

_RANK_INF = float("inf")


@dataclass
class TokenizerModel:
    """A byte-level BPE model plus added tokens and special-token ids.

    ``vocab`` maps printable-unit strings to ids, ``merges`` is ranked by
    list index, ``added_tokens`` maps surface strings (real codepoints, not
    byte units) to ids at or above ``len(vocab)``. Ids are dense across
    vocab and added tokens together.
    """

    vocab: dict[str, int]
    merges: list[tuple[str, str]] = field(default_factory=list)
    added_tokens: dict[str, int] = field(default_factory=dict)
    special: dict[str, str] = field(default_factory=dict)

    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)
    _id_to_piece: dict[int, str] = field(init=False, repr=False, compare=False)
    _id_to_added: dict[int, str] = field(init=False, repr=False, compare=False)
    _trie: dict = field(init=False, repr=False, compare=False)
    _cache: dict[str, tuple[int, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._validate()
        self._ranks = {}
        for i, pair in enumerate(self.merges):
            self._ranks.setdefault(pair, i)
        self._id_to_piece = {i: p for p, i in self.vocab.items()}
        self._id_to_added = {i: s for s, i in self.added_tokens.items()}
        self._trie = _build_trie(self.added_tokens)
        self._cache = {}

    def _validate(self) -> None:
        ids = list(self.vocab.values()) + list(self.added_tokens.values())
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate token ids in vocab/added_tokens")
        if ids and (min(ids) != 0 or max(ids) != len(ids) - 1):
            raise ValueError("token ids must be dense over [0, total size)")
        base = len(self.vocab)
        for surface, tid in self.added_tokens.items():
            if not surface:
                raise ValueError("added token surface must be non-empty")
            if tid < base:
                raise ValueError(f"added token id {tid} below base vocab size {base}")
        for left, right in self.merges:
            if left + right not in self.vocab:
                raise ValueError(f"merge pair ({left!r}, {right!r}) concatenation absent from vocab")
        for name, surface in self.special.items():
            if name not in ("eos", "unk"):
                raise ValueError(f"unknown special token name {name!r}")
            if surface not in self.vocab and surface not in self.added_tokens:
                raise ValueError(f"special token {surface!r} not present in model")

    # -- sizes ------------------------------------------------------------

    @property
    def base_size(self) -> int:
        return len(self.vocab)

    @property
    def total_size(self) -> int:
        return len(self.vocab) + len(self.added_tokens)

    def _special_id(self, name: str) -> int | None:
        surface = self.special.get(name)
        if surface is None:
            return None
        if surface in self.added_tokens:
            return self.added_tokens[surface]
        return self.vocab[surface]

    @property
    def eos_id(self) -> int | None:
        return self._special_id("eos")

    @property
    def unk_id(self) -> int | None:
        return self._special_id("unk")

    # -- encoding ---------------------------------------------------------

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        trie = self._trie
        span_start = 0
        i = 0
        n = len(text)
        while i < n:
            match = _longest_added(trie, text, i) if trie else None
            if match is None:
                i += 1
                continue
            end, tid = match
            if span_start < i:
                self._encode_span(text[span_start:i], ids)
            ids.append(tid)
            i = end
            span_start = end
        if span_start < n:
            self._encode_span(text[span_start:], ids)
        return ids

    def _encode_span(self, span: str, out: list[int]) -> None:
        for pretoken in _PRETOKEN.findall(span):
            cached = self._cache.get(pretoken)
            if cached is None:
                units = tuple(BYTE_TO_UNIT[b] for b in pretoken.encode("utf-8"))
                cached = tuple(self._piece_id(p) for p in self._merge(units))
                self._cache[pretoken] = cached
            out.extend(cached)

    def _piece_id(self, piece: str) -> int:
        tid = self.vocab.get(piece)
        if tid is None:
            raise ValueError(f"piece {piece!r} not in vocab (model lacks byte coverage)")
        return tid

    def _merge(self, units: tuple[str, ...]) -> list[str]:
        word = list(units)
        ranks = self._ranks
        while len(word) >= 2:
            best = min(
                (pair for pair in zip(word, word[1:])),
                key=lambda pair: ranks.get(pair, _RANK_INF),
            )
            if best not in ranks:
                break
            merged: list[str] = []
            i = 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    merged.append(word[i] + word[i + 1])
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = merged
        return word

    # -- decoding ---------------------------------------------------------

    def decode(self, ids: list[int]) -> str:
        parts: list[str] = []
        buf = bytearray()

        def flush() -> None:
            if buf:
                parts.append(buf.decode("utf-8", errors="replace"))
                buf.clear()

        for tid in ids:
            surface = self._id_to_added.get(tid)
            if surface is not None:
                flush()
                parts.append(surface)
                continue
            piece = self._id_to_piece.get(tid)
            if piece is None:
                raise ValueError(f"unknown id {tid}")
            for ch in piece:
                b = UNIT_TO_BYTE.get(ch)
                if b is None:
                    raise ValueError(f"token {tid} contains non-byte unit {ch!r}")
                buf.append(b)
        flush()
        return "".join(parts)

    def token_count(self, text: str) -> int:
        return len(self.encode(text))


def _build_trie(added: dict[str, int]) -> dict:
    trie: dict = {}
    for surface, tid in added.items():
        node = trie
        for ch in surface:
            node = node.setdefault(ch, {})
        node[""] = tid  # terminal marker; "" can never be a codepoint key
    return trie


def _longest_added(trie: dict, text: str, start: int) -> tuple[int, int] | None:
    node = trie
    best: tuple[int, int] | None = None
    j = start
    n = len(text)
    while j < n:
        node = node.get(text[j])
        if node is None:
            break
        j += 1
        tid = node.get("")
        if tid is not None:
            best = (j, tid)
    return best


# -- fertility --------------------------------------------------------------


@dataclass(frozen=True)
class FertilityReport:
    word_count: int
    token_count: int

    @property
    def fertility(self) -> float:
        return self.token_count / self.word_count

    def format(self) -> str:
        return (
            f"word_count: {self.word_count}\n"
            f"token_count: {self.token_count}\n"
            f"fertility: {self.fertility:.2f}"
        )


def fertility(model: TokenizerModel, text: str) -> FertilityReport:
    """Tokens per whitespace-delimited word over ``text``.

    Raises on whitespace-only input: fertility of zero words is undefined.
    """
    words = len(text.split())
    if words == 0:
        raise ValueError("fertility undefined: text contains no words")
    return FertilityReport(word_count=words, token_count=model.token_count(text))


# -- serialization ----------------------------------------------------------


def _parse_merge(entry) -> tuple[str, str]:
    if isinstance(entry, str):
        parts = entry.split(" ")
        if len(parts) != 2:
            raise ValueError(f"malformed merge entry {entry!r}")
        return (parts[0], parts[1])
    if isinstance(entry, (list, tuple)) and len(entry) == 2:
        return (str(entry[0]), str(entry[1]))
    raise ValueError(f"malformed merge entry {entry!r}")


def _from_payload(payload: dict) -> TokenizerModel:
    if "model" in payload and isinstance(payload["model"], dict):
        inner = payload["model"]
    else:
        inner = payload
    vocab = inner.get("vocab")
    if not isinstance(vocab, dict):
        raise ValueError("tokenizer file has no vocab object")
    for piece, tid in vocab.items():
        if not isinstance(tid, int):
            raise ValueError(f"vocab id for {piece!r} is not an integer")
    merges = [_parse_merge(m) for m in inner.get("merges", [])]
    added: dict[str, int] = {}
    for entry in payload.get("added_tokens", []):
        if not isinstance(entry, dict) or "content" not in entry or "id" not in entry:
            raise ValueError(f"malformed added_tokens entry {entry!r}")
        content, tid = entry["content"], entry["id"]
        if content in added:
            raise ValueError(f"duplicate added token {content!r}")
        added[content] = tid
    special = payload.get("special", {})
    if not isinstance(special, dict):
        raise ValueError("special must be an object of name -> surface")
    return TokenizerModel(vocab=dict(vocab), merges=merges, added_tokens=added, special=dict(special))


def load_model(path: str | Path) -> TokenizerModel:
    """Load a tokenizer from our canonical JSON layout or the single-file
    layout used by mainstream tokenizer libraries (vocab/merges nested under
    a ``model`` key)."""
    raw = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed tokenizer JSON in {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ValueError(f"tokenizer file {path} is not a JSON object")
    return _from_payload(payload)


def save_model(model: TokenizerModel, path: str | Path) -> None:
    payload: dict = {
        "vocab": model.vocab,
        "merges": [f"{l} {r}" for l, r in model.merges],
        "added_tokens": [{"content": s, "id": i} for s, i in model.added_tokens.items()],
    }
    if model.special:
        payload["special"] = model.special
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, indent=None, separators=(",", ":")),
        encoding="utf-8",
    )
