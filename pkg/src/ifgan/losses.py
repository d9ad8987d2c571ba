"""Adversarial, reconstruction and expression losses and their weighting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    adversarial: float = 1.0  # lambda1
    l1: float = 200.0  # lambda2
    expression: float = 50.0  # lambda3

    def __post_init__(self):
        for name in ("adversarial", "l1", "expression"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.adversarial * c, self.l1 * c, self.expression * c)


@dataclass
class ConditionTuple:
    """(average neutral, subject expressive, candidate) triple seen by D."""

    i_an: Tensor
    i_se: Tensor
    x: Tensor
    is_real: bool

    def __post_init__(self):
        if not (self.i_an.shape == self.i_se.shape == self.x.shape):
            raise ValueError(f"tuple members differ in shape: {self.i_an.shape}, {self.i_se.shape}, {self.x.shape}")


def _finite(t: Tensor, what: str) -> None:
    if np.isnan(t.data).any():
        raise FloatingPointError(f"NaN in {what}")


def d_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    """BCE(real, 1) + BCE(fake, 0), each averaged over batch and patches."""
    _finite(logits_real, "real logits")
    _finite(logits_fake, "fake logits")
    return T.add(T.bce_with_logits(logits_real, 1.0), T.bce_with_logits(logits_fake, 0.0))


def g_adv_loss(logits_fake: Tensor) -> Tensor:
    """Non-saturating generator loss BCE(D(fake), 1)."""
    _finite(logits_fake, "fake logits")
    return T.bce_with_logits(logits_fake, 1.0)


def l1_loss(gen: Tensor, target: Tensor) -> Tensor:
    if gen.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {gen.shape} vs {target.shape}")
    return T.mean(T.abs(T.sub(gen, target)))


def expr_loss_parts(logits_real_pair: Tensor, logits_fake_pair: Tensor,
                    labels: Sequence[int]) -> tuple[Tensor, Tensor]:
    return T.cross_entropy(logits_real_pair, labels), T.cross_entropy(logits_fake_pair, labels)


def expr_loss(logits_real_pair: Tensor, logits_fake_pair: Tensor, labels: Sequence[int]) -> Tensor:
    """Softmax cross-entropy on the real pair plus that on the generated pair."""
    real, fake = expr_loss_parts(logits_real_pair, logits_fake_pair, labels)
    return T.add(real, fake)


@dataclass
class Objectives:
    generator: Tensor
    discriminator: Tensor
    classifier: Tensor


def combined_loss(d: Tensor, g_adv: Tensor, l1: Tensor, expr_real: Tensor, expr_fake: Tensor,
                  w: LossWeights = LossWeights()) -> Objectives:
    """Split the weighted joint objective into one scalar per network.

    G: l1w*g_adv + l2w*l1 + l3w*expr_fake;  D: l1w*d;  E: l3w*(expr_real + expr_fake).
    """
    for name, t in (("d", d), ("g_adv", g_adv), ("l1", l1), ("expr_real", expr_real), ("expr_fake", expr_fake)):
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite loss part {name}")
    gen = T.add(T.add(T.mul(g_adv, w.adversarial), T.mul(l1, w.l1)), T.mul(expr_fake, w.expression))
    disc = T.mul(d, w.adversarial)
    cls = T.mul(T.add(expr_real, expr_fake), w.expression)
    return Objectives(gen, disc, cls)
