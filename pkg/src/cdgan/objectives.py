"""Adversarial and phase-classification losses.

Realness logits are clamped to [-30, 30] and pushed through log-sigmoid, so
``log D(x)`` and ``log(1 - D(x))`` never overflow. Classification uses the
standard cross-entropy ``-log p(target)`` with probabilities floored at 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidInputError, NumericError

LOGIT_CLAMP = 30.0
PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)
SIMPLEX_TOL = 1e-6


def _tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t.detach()).all()):
        raise NumericError(f"non-finite values in {what}")


def log_sigmoid(logits) -> torch.Tensor:
    return F.logsigmoid(_tensor(logits).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def adv_loss_d(src_real_logits, src_fake_logits) -> torch.Tensor:
    """Discriminator adversarial loss: -(mean log D(x) + mean log(1 - D(G(x, c))))."""
    real, fake = _tensor(src_real_logits), _tensor(src_fake_logits)
    _check_finite(real, "real realness logits")
    _check_finite(fake, "synthetic realness logits")
    # log(1 - sigmoid(z)) == logsigmoid(-z)
    return -(log_sigmoid(real).mean() + log_sigmoid(-fake).mean())


def adversarial_value(src_real_logits, src_fake_logits) -> torch.Tensor:
    """The minimax value E[log D(x)] + E[log(1 - D(G(x, c)))] that D maximizes."""
    return -adv_loss_d(src_real_logits, src_fake_logits)


def adv_loss_g(src_fake_logits, saturating: bool = False) -> torch.Tensor:
    """Generator adversarial loss.

    The default non-saturating form is ``-mean log D(G(x, c))``; with
    ``saturating=True`` the generator minimizes ``mean log(1 - D(G(x, c)))``
    exactly as in the minimax game.
    """
    fake = _tensor(src_fake_logits)
    _check_finite(fake, "synthetic realness logits")
    if saturating:
        return log_sigmoid(-fake).mean()
    return -log_sigmoid(fake).mean()


def _target_indices(target, n: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(target) if not torch.is_tensor(target) else target)
    if t.ndim == 2:
        if t.shape[1] != 3 or not bool(((t == 0) | (t == 1)).all()) or not bool((t.sum(1) == 1).all()):
            raise InvalidInputError("target codes must be one-hot over three phases")
        t = t.argmax(dim=1)
    t = t.long().reshape(-1)
    if t.shape[0] != n:
        raise InvalidInputError(f"{t.shape[0]} targets for {n} predictions")
    if bool(((t < 0) | (t > 2)).any()):
        raise InvalidInputError("target phase index out of range")
    return t


def cls_loss(cls_probs, target) -> torch.Tensor:
    """Mean cross-entropy ``-log p(target)`` over a batch of phase probabilities.

    ``target`` may be one-hot codes of shape (N, 3) or integer labels of shape (N,).
    """
    p = _tensor(cls_probs)
    if p.ndim != 2 or p.shape[1] != 3:
        raise InvalidInputError(f"expected (N, 3) probabilities, got {tuple(p.shape)}")
    pd = p.detach()
    if bool((pd < -SIMPLEX_TOL).any()) or bool(((pd.sum(1) - 1).abs() > SIMPLEX_TOL).any()):
        raise InvalidInputError("class probabilities are not on the simplex")
    idx = _target_indices(target, p.shape[0])
    picked = p.gather(1, idx[:, None])[:, 0]
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def cls_loss_from_logits(cls_logits, target) -> torch.Tensor:
    """Same value as ``cls_loss(softmax(logits), target)``, computed in log space."""
    z = _tensor(cls_logits)
    _check_finite(z, "class logits")
    idx = _target_indices(target, z.shape[0])
    logp = F.log_softmax(z, dim=1).gather(1, idx[:, None])[:, 0]
    return -logp.clamp_min(LOG_PROB_FLOOR).mean()


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    # weight of synthetic-image classification inside the discriminator objective
    lambda_synth_d: float = 1.0

    def __post_init__(self):
        if self.lambda_cls < 0 or self.lambda_synth_d < 0:
            raise InvalidInputError("loss weights must be non-negative")


@dataclass
class LossValues:
    adv_d: float = 0.0
    adv_g: float = 0.0
    cls_real: float = 0.0
    cls_fake: float = 0.0
    cls_fake_d: float = 0.0
    d_total: float = 0.0
    g_total: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def d_objective(losses: LossValues, weights: LossWeights):
    """adv_d + lambda_cls * (cls_real + lambda_synth_d * cls_fake_d)."""
    return losses.adv_d + weights.lambda_cls * (losses.cls_real + weights.lambda_synth_d * losses.cls_fake_d)


def g_objective(losses: LossValues, weights: LossWeights):
    return losses.adv_g + weights.lambda_cls * losses.cls_fake
