"""Loss bookkeeping for supervised and preference post-training.

Pure 64-bit scalar math over log-probabilities that some training run
already produced; nothing here touches a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

IGNORE_LABEL = -100


@dataclass(frozen=True)
class MaskedLogProbs:
    token_logprobs: Sequence[float]
    labels: Sequence[int]

    def __post_init__(self) -> None:
        if len(self.token_logprobs) != len(self.labels):
            raise ValueError(
                f"token_logprobs length {len(self.token_logprobs)} != labels length {len(self.labels)}"
            )


def masked_ce(batch: MaskedLogProbs) -> float:
    """Mean negative log-probability over positions whose label is not the
    ignore sentinel. A fully masked batch has no defined loss."""
    total = 0.0
    count = 0
    for lp, label in zip(batch.token_logprobs, batch.labels):
        if label == IGNORE_LABEL:
            continue
        total += lp
        count += 1
    if count == 0:
        raise ValueError("all positions are masked; loss undefined")
    return -total / count


def perplexity(loss: float) -> float:
    return math.exp(loss)


@dataclass(frozen=True)
class PreferencePair:
    policy_chosen_lp: float
    policy_rejected_lp: float
    ref_chosen_lp: float
    ref_rejected_lp: float


@dataclass(frozen=True)
class DpoBatch:
    pairs: Sequence[PreferencePair]
    beta: float = 0.1

    def __post_init__(self) -> None:
        if len(self.pairs) == 0:
            raise ValueError("empty preference batch")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class DpoStats:
    loss: float
    mean_margin: float
    reward_accuracy: float


def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow for large |x|
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def dpo_loss(batch: DpoBatch) -> DpoStats:
    """Preference loss -log sigmoid(margin) with the beta-scaled margin
    m = beta * ((policy_c - policy_r) - (ref_c - ref_r)).

    mean_margin reports the beta-scaled margin, the quantity optimizers log.
    reward_accuracy is the fraction of pairs with positive margin; exact
    ties count one half.
    """
    loss_sum = 0.0
    margin_sum = 0.0
    wins = 0.0
    for pair in batch.pairs:
        margin = batch.beta * (
            (pair.policy_chosen_lp - pair.policy_rejected_lp)
            - (pair.ref_chosen_lp - pair.ref_rejected_lp)
        )
        loss_sum += _softplus(-margin)
        margin_sum += margin
        if margin > 0:
            wins += 1.0
        elif margin == 0:
            wins += 0.5
    n = len(batch.pairs)
    return DpoStats(loss=loss_sum / n, mean_margin=margin_sum / n, reward_accuracy=wins / n)
