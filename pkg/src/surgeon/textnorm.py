"""Arabic text normalization.

A small, deterministic cleanup pass applied before tokenization: Unicode
compatibility normalization plus the usual Arabic letter unifications. The
pass order is fixed (NFKC, alif unification, tatweel removal, alif-maqsura
to ya) and the whole pipeline is idempotent. Diacritics are deliberately
left alone, as are the hamza carriers U+0624 and U+0626.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

ALIF = "ا"
ALIF_MADDA = "آ"
ALIF_HAMZA_ABOVE = "أ"
ALIF_HAMZA_BELOW = "إ"
TATWEEL = "ـ"
ALIF_MAQSURA = "ى"
YA = "ي"

_ALIF_VARIANTS = {ALIF_MADDA: ALIF, ALIF_HAMZA_ABOVE: ALIF, ALIF_HAMZA_BELOW: ALIF}


@dataclass(frozen=True)
class NormalizationConfig:
    """Which passes run. Defaults enable the full pipeline."""

    nfkc: bool = True
    alif_unify: bool = True
    tatweel_strip: bool = True
    ya_unify: bool = True


def _one_pass(text: str, cfg: NormalizationConfig) -> str:
    if cfg.nfkc:
        text = unicodedata.normalize("NFKC", text)
    if cfg.alif_unify:
        for src, dst in _ALIF_VARIANTS.items():
            text = text.replace(src, dst)
    if cfg.tatweel_strip:
        text = text.replace(TATWEEL, "")
    if cfg.ya_unify:
        text = text.replace(ALIF_MAQSURA, YA)
    return text


def normalize(text: str, cfg: NormalizationConfig = NormalizationConfig()) -> str:
    """Normalize ``text`` under ``cfg``.

    Iterates the pass pipeline to a fixpoint: NFKC can re-compose a bare alif
    with a stray combining hamza back into a hamzated alif, so a single sweep
    is not idempotent on adversarial combining-mark input. The loop terminates
    because each extra round strictly consumes such combining marks.
    """
    while True:
        out = _one_pass(text, cfg)
        if out == text:
            return out
        text = out
