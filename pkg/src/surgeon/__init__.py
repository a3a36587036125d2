"""Tokenizer vocabulary surgery and checkpoint plumbing for LLM post-training.

Everything in here works on bit-exact file formats (tokenizer JSON, tensor
containers, packed token streams) and deliberately avoids any GPU dependency.
"""

__version__ = "0.1.0"

from .textnorm import NormalizationConfig, normalize
from .tokenizer import TokenizerModel, load_model, save_model
from .inject import CandidatePieceList, InjectionReport, dedup_merge, roundtrip_single

__all__ = [
    "NormalizationConfig",
    "normalize",
    "TokenizerModel",
    "load_model",
    "save_model",
    "CandidatePieceList",
    "InjectionReport",
    "dedup_merge",
    "roundtrip_single",
]
