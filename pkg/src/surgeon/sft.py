"""Instruction-data preparation: ChatML rendering, dedup, packed tensors.

Rendering is the plain ChatML template, one ``<|im_start|>role\\ncontent
<|im_end|>\\n`` block per turn. Deduplication hashes the rendered string, so
two examples that only differ in whitespace inside a turn stay distinct while
a re-listed example collapses.

``pack_sft`` materializes the token and label streams. Labels follow the
usual convention: everything is the ignore sentinel except assistant
responses. Token positions are computed by encoding each turn as three
sub-fragments (header ``<|im_start|>role``, body ``\\ncontent<|im_end|>``,
trailing ``\\n``). The fragment cuts sit either at added-token boundaries or
at a word/whitespace boundary, both of which the encoder never merges
across, so the concatenation of fragment encodings is identical to encoding
the rendered string in one pass; the test suite asserts that equality. One
consequence: the newline between the assistant header and the response is
carried by the response's first token and is therefore unmasked.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import IGNORE_LABEL
from .tokenizer import TokenizerModel

IM_START = "<|im_start|>"
IM_END = "<|im_end|>"

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"
_ROLES = (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT)


@dataclass(frozen=True)
class Turn:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class InstructionExample:
    turns: list[Turn]

    def validate(self) -> None:
        turns = self.turns
        if turns and turns[0].role == ROLE_SYSTEM:
            turns = turns[1:]
        if any(t.role == ROLE_SYSTEM for t in turns):
            raise ValueError("system turn only allowed in leading position")
        if not any(t.role == ROLE_ASSISTANT for t in turns):
            raise ValueError("example has no assistant turn")
        for i, turn in enumerate(turns):
            expected = ROLE_USER if i % 2 == 0 else ROLE_ASSISTANT
            if turn.role != expected:
                raise ValueError(
                    f"turn {i} has role {turn.role!r}, expected {expected!r} "
                    "(user/assistant must alternate)"
                )

    @classmethod
    def from_dict(cls, data: dict) -> "InstructionExample":
        turns = [Turn(role=t["role"], content=t["content"]) for t in data["turns"]]
        return cls(turns=turns)


def _effective_turns(example: InstructionExample, system_prompt: str | None) -> list[Turn]:
    example.validate()
    turns = list(example.turns)
    has_system = bool(turns) and turns[0].role == ROLE_SYSTEM
    if not has_system and system_prompt is not None:
        turns.insert(0, Turn(role=ROLE_SYSTEM, content=system_prompt))
    return turns


def render_chatml(example: InstructionExample, system_prompt: str | None = None) -> str:
    """Render to the ChatML wire format. ``system_prompt`` is only used when
    the example does not carry its own system turn."""
    parts = []
    for turn in _effective_turns(example, system_prompt):
        parts.append(f"{IM_START}{turn.role}\n{turn.content}{IM_END}\n")
    return "".join(parts)


def dedup_md5(
    examples: Iterable[InstructionExample], system_prompt: str | None = None
) -> tuple[list[InstructionExample], int]:
    """Drop examples whose rendered string was already seen; first stays.
    Returns (kept, dropped_count)."""
    seen: set[bytes] = set()
    kept: list[InstructionExample] = []
    dropped = 0
    for example in examples:
        digest = hashlib.md5(render_chatml(example, system_prompt).encode("utf-8")).digest()
        if digest in seen:
            dropped += 1
            continue
        seen.add(digest)
        kept.append(example)
    return kept, dropped


@dataclass(frozen=True)
class MaskReport:
    total_tokens: int
    response_tokens: int

    @property
    def response_fraction(self) -> float:
        return self.response_tokens / self.total_tokens if self.total_tokens else 0.0

    def to_dict(self) -> dict:
        return {
            "total_tokens": self.total_tokens,
            "response_tokens": self.response_tokens,
            "response_fraction": self.response_fraction,
        }


def encode_example(
    model: TokenizerModel, example: InstructionExample, system_prompt: str | None = None
) -> tuple[list[int], list[int]]:
    """Token and label lists for one example. Labels equal the token id on
    assistant response positions (body plus terminating end marker) and the
    ignore sentinel everywhere else."""
    if IM_START not in model.added_tokens or IM_END not in model.added_tokens:
        raise ValueError("model must define the chat markers as added tokens")
    tokens: list[int] = []
    labels: list[int] = []
    for turn in _effective_turns(example, system_prompt):
        header = model.encode(f"{IM_START}{turn.role}")
        body = model.encode(f"\n{turn.content}{IM_END}")
        tail = model.encode("\n")
        tokens.extend(header)
        labels.extend([IGNORE_LABEL] * len(header))
        tokens.extend(body)
        labels.extend(body if turn.role == ROLE_ASSISTANT else [IGNORE_LABEL] * len(body))
        tokens.extend(tail)
        labels.extend([IGNORE_LABEL] * len(tail))
    return tokens, labels


def pack_sft(
    examples: Sequence[InstructionExample],
    model: TokenizerModel,
    system_prompt: str | None,
    out_tokens: str | Path,
    out_labels: str | Path,
) -> MaskReport:
    """Write the concatenated token and label streams (little-endian int32,
    equal length) and report how much of the stream is supervised."""
    total = 0
    unmasked = 0
    with open(out_tokens, "wb") as ft, open(out_labels, "wb") as fl:
        for example in examples:
            tokens, labels = encode_example(model, example, system_prompt)
            np.asarray(tokens, dtype="<i4").tofile(ft)
            np.asarray(labels, dtype="<i4").tofile(fl)
            total += len(tokens)
            unmasked += sum(1 for l in labels if l != IGNORE_LABEL)
    return MaskReport(total_tokens=total, response_tokens=unmasked)


def load_examples_jsonl(path: str | Path) -> list[InstructionExample]:
    examples = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{i + 1}: malformed JSON: {exc}") from exc
        examples.append(InstructionExample.from_dict(data))
    return examples
