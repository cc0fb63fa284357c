"""Closed-form SFT / DPO / KTO losses on caller-supplied log-probabilities.

These check external trainers; nothing here computes gradients. Note the
DPO temperature is called ``lam`` here; most trainers call it ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


class NonFiniteInput(ValueError):
    pass


class EmptyInput(ValueError):
    pass


def _finite(*xs: float):
    for x in xs:
        if not math.isfinite(x):
            raise NonFiniteInput(f"non-finite input {x!r}")


def log_sigmoid(x: float) -> float:
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class PolicyLogProbs:
    """log M_theta(E|x) and log M_ref(E|x) for one completion."""

    logp_policy: float
    logp_reference: float

    def __post_init__(self):
        _finite(self.logp_policy, self.logp_reference)
        if self.logp_policy > 0 or self.logp_reference > 0:
            raise ValueError("log-probabilities must be <= 0")

    @property
    def reward(self) -> float:
        return self.logp_policy - self.logp_reference


@dataclass(frozen=True)
class KtoConfig:
    beta: float = 0.5
    w_desirable: float = 1.0
    w_undesirable: float = 1.0
    z_ref: float = 0.0

    def __post_init__(self):
        _finite(self.beta, self.w_desirable, self.w_undesirable, self.z_ref)
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.w_desirable < 0 or self.w_undesirable < 0:
            raise ValueError("KTO weights must be >= 0")


def sft_loss(target_token_logprobs: Sequence[float]) -> float:
    """Negative log-likelihood of the target tokens."""
    vals = list(target_token_logprobs)
    _finite(*vals)
    if any(v > 0 for v in vals):
        raise ValueError("token log-probabilities must be <= 0")
    return -math.fsum(vals)


def dpo_margin(pos: PolicyLogProbs, neg: PolicyLogProbs) -> float:
    return (pos.logp_policy - neg.logp_policy) - (pos.logp_reference - neg.logp_reference)


def dpo_loss(pos: PolicyLogProbs, neg: PolicyLogProbs, lam: float = 0.5) -> float:
    """-log sigmoid(lam * margin) for a (preferred, dispreferred) pair."""
    _finite(lam)
    if lam <= 0:
        raise ValueError("lam must be > 0")
    return -log_sigmoid(lam * dpo_margin(pos, neg))


def kto_value(lp: PolicyLogProbs, config: KtoConfig, desirable: bool) -> float:
    r = lp.reward
    if desirable:
        return config.beta * (r - config.z_ref)
    return config.beta * (config.z_ref - r)


def kto_loss(items: Iterable[tuple[PolicyLogProbs, bool]], config: KtoConfig) -> float:
    """Mean of w_E * (1 - sigmoid(v)) over (logprobs, desirable) items."""
    terms = []
    for lp, desirable in items:
        w = config.w_desirable if desirable else config.w_undesirable
        terms.append(w * (1.0 - sigmoid(kto_value(lp, config, desirable))))
    if not terms:
        raise EmptyInput("kto_loss needs at least one item")
    return math.fsum(terms) / len(terms)
