"""Training losses: Dice, weighted cross-entropy, focal, and plain BCE.

All losses consume logits (never probabilities) so the log terms can be
computed through softplus without materializing log(sigmoid); targets are
binary arrays of the same shape. Reduction is the mean over every pixel and
batch element, except Dice which is a batch-global ratio by default.

With z the logit and g the {0,1} target:
    bce           = mean[ g*softplus(-z) + (1-g)*softplus(z) ]
    weighted_ce   = mean[ beta*g*softplus(-z) + (1-beta)*(1-g)*softplus(z) ]
                    (equals -beta*g*log(p) - (1-beta)*(1-g)*log(1-p))
    focal         = mean[ alpha_t * (1 - p_t)^gamma * softplus(-z_t) ]
                    with z_t = z if g=1 else -z, so 1-p_t = sigmoid(-z_t)
    dice          = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, mul, neg, power, sigmoid, softplus


@dataclass(frozen=True)
class LossConfig:
    kind: str = "dice"  # dice | weighted_ce | focal | bce
    beta: float = 0.9
    gamma: float = 2.0
    alpha: float = 0.5
    epsilon_smooth: float = 1.0
    per_image_dice: bool = False

    def __post_init__(self):
        if self.kind not in ("dice", "weighted_ce", "focal", "bce"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must be in (0, 1), got {self.beta}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.epsilon_smooth <= 0.0:
            raise ValueError(f"epsilon_smooth must be > 0, got {self.epsilon_smooth}")

    def compute(self, logits: Tensor, target) -> Tensor:
        if self.kind == "dice":
            return dice_loss(logits, target, self.epsilon_smooth, self.per_image_dice)
        if self.kind == "weighted_ce":
            return weighted_ce(logits, target, self.beta)
        if self.kind == "focal":
            return focal_loss(logits, target, self.gamma, self.alpha)
        return bce_loss(logits, target)


def _target_const(logits: Tensor, target) -> Tensor:
    g = np.asarray(target)
    if g.shape != logits.shape:
        raise ShapeError(f"target shape {g.shape} does not match logits {logits.shape}")
    vals = np.unique(g)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"target must be binary, found values {vals[:5]}")
    return Tensor(g.astype(logits.dtype.type))


def dice_loss(
    logits: Tensor, target, epsilon_smooth: float = 1.0, per_image: bool = False
) -> Tensor:
    """1 - soft Dice between sigmoid(logits) and the binary target.

    Batch-global by default: numerator/denominator sums run over the whole
    batch before the ratio, which keeps batches containing empty masks
    stable. ``per_image`` averages one ratio per batch element instead.
    """
    g = _target_const(logits, target)
    p = sigmoid(logits)
    if not per_image or logits.data.ndim < 2:
        inter = mul(p, g).sum()
        num = 2.0 * inter + epsilon_smooth
        den = p.sum() + g.sum() + epsilon_smooth
        return 1.0 - num / den
    b = logits.shape[0]
    total = None
    for i in range(b):
        ind = np.zeros(logits.shape, dtype=logits.dtype.type)
        ind[i] = 1.0
        sel = Tensor(ind)
        inter = mul(mul(p, g), sel).sum()
        num = 2.0 * inter + epsilon_smooth
        den = mul(p, sel).sum() + mul(g, sel).sum() + epsilon_smooth
        term = 1.0 - num / den
        total = term if total is None else total + term
    return total * (1.0 / b)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy from logits."""
    g = _target_const(logits, target)
    pix = mul(g, softplus(neg(logits))) + mul(1.0 - g, softplus(logits))
    return pix.mean()


def weighted_ce(logits: Tensor, target, beta: float = 0.9) -> Tensor:
    """Class-weighted BCE: positives weighted beta, negatives 1 - beta."""
    g = _target_const(logits, target)
    w_pos = beta * g
    w_neg = (1.0 - beta) * (1.0 - g)
    pix = mul(w_pos, softplus(neg(logits))) + mul(w_neg, softplus(logits))
    return pix.mean()


def focal_loss(logits: Tensor, target, gamma: float = 2.0, alpha: float = 0.5) -> Tensor:
    """Focal loss: BCE modulated by (1 - p_t)^gamma, class-balanced by alpha.

    Well-classified pixels (p_t near 1) are down-weighted by the modulator;
    gamma = 0 recovers alpha-weighted BCE exactly.
    """
    g = _target_const(logits, target)
    sign = 2.0 * g - 1.0  # +1 on foreground, -1 on background
    z_t = mul(logits, sign)
    one_minus_pt = sigmoid(neg(z_t))
    alpha_t = alpha * g + (1.0 - alpha) * (1.0 - g)
    pix = mul(mul(alpha_t, power(one_minus_pt, gamma)), softplus(neg(z_t)))
    return pix.mean()
