"""Segmentation losses: pixelwise cross-entropy, soft Dice, and their
weighted combination.

Both losses consume a probability map p in (0, 1) (the network's sigmoid
output) and a binary target y, and produce scalar graph nodes with analytic
gradients w.r.t. p. Targets never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .substrate import ShapeError, Tensor4, add, scale


@dataclass(frozen=True)
class LossConfig:
    """Weights and constants of the combined objective.

    ce_weight       weight of the cross-entropy term added to the Dice term
    dice_smoothing  additive smoothing in the Dice numerator/denominator
    prob_clamp      probabilities are clamped to [prob_clamp, 1 - prob_clamp]
                    inside the cross-entropy (clamped pixels get zero grad)
    dice_per_image  average per-image Dice losses instead of pooling the
                    whole batch into one Dice quotient
    """

    ce_weight: float = 1.0
    dice_smoothing: float = 1.0
    prob_clamp: float = 1e-7
    dice_per_image: bool = False

    def __post_init__(self):
        if self.ce_weight < 0:
            raise ValueError(f"ce_weight must be >= 0, got {self.ce_weight}")
        if self.dice_smoothing <= 0:
            raise ValueError(f"dice_smoothing must be > 0, got {self.dice_smoothing}")
        if not (0.0 < self.prob_clamp < 0.5):
            raise ValueError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")


def _check_pair(p, y):
    if p.shape != y.shape:
        raise ShapeError(f"loss: prediction shape {p.shape} != target shape {y.shape}")
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise ValueError("loss: predictions must lie in [0, 1]")
    if not np.all((y.data == 0) | (y.data == 1)):
        raise ValueError("loss: targets must be binary (0 or 1)")


def _scalar(value, parents, dtype):
    return Tensor4._from_op(np.full((1, 1, 1, 1), value, dtype=dtype), parents)


def bce_loss(p, y, prob_clamp=1e-7):
    """Mean binary cross-entropy over all pixels.

    L = -mean(y * log(pc) + (1 - y) * log(1 - pc)) with
    pc = clamp(p, prob_clamp, 1 - prob_clamp). The clamp keeps the loss and
    its gradient finite for saturated predictions; pixels sitting outside
    the open clamp interval receive zero gradient.
    """
    _check_pair(p, y)
    if not (0.0 < prob_clamp < 0.5):
        raise ValueError(f"prob_clamp must be in (0, 0.5), got {prob_clamp}")
    lo = np.asarray(prob_clamp, dtype=p.dtype)
    hi = np.asarray(1.0 - prob_clamp, dtype=p.dtype)
    pc = np.clip(p.data, lo, hi)
    m = p.data.size
    value = float(-np.sum(y.data * np.log(pc) + (1.0 - y.data) * np.log1p(-pc)) / m)
    out = _scalar(value, (p, y), p.dtype)
    if out.requires_grad:
        inside = (p.data > lo) & (p.data < hi)

        def backward(g):
            if p.requires_grad:
                gp = (pc - y.data) / (pc * (1.0 - pc) * m)
                p._accum(float(g.reshape(())) * gp * inside)

        out._backward = backward
    return out


def _dice_terms(p, y, eps, axes):
    inter = np.sum(p * y, axis=axes)
    denom = np.sum(p, axis=axes) + np.sum(y, axis=axes)
    return 2.0 * inter + eps, denom + eps


def dice_loss(p, y, smoothing=1.0, per_image=False):
    """Soft Dice loss: 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps).

    The sums pool every pixel in the batch by default, so one quotient
    couples all samples; per_image=True instead averages one quotient per
    batch element. Permutation invariance over pixels holds either way.
    """
    _check_pair(p, y)
    if smoothing <= 0:
        raise ValueError(f"smoothing must be > 0, got {smoothing}")
    eps = float(smoothing)
    if per_image:
        num, den = _dice_terms(p.data, y.data, eps, axes=(1, 2, 3))  # per sample
        value = float(np.mean(1.0 - num / den))
    else:
        num, den = _dice_terms(p.data, y.data, eps, axes=None)
        value = float(1.0 - num / den)
    out = _scalar(value, (p, y), p.dtype)
    if out.requires_grad:
        def backward(g):
            if not p.requires_grad:
                return
            gs = float(g.reshape(()))
            if per_image:
                n = p.shape[0]
                nb = num.reshape(n, 1, 1, 1)
                db = den.reshape(n, 1, 1, 1)
                gp = gs * (nb - 2.0 * y.data * db) / (db * db * n)
            else:
                gp = gs * (num - 2.0 * y.data * den) / (den * den)
            p._accum(gp.astype(p.dtype))

        out._backward = backward
    return out


def combined_loss(p, y, cfg: LossConfig = LossConfig()):
    """Dice term plus ce_weight times the cross-entropy term."""
    d = dice_loss(p, y, smoothing=cfg.dice_smoothing, per_image=cfg.dice_per_image)
    b = bce_loss(p, y, prob_clamp=cfg.prob_clamp)
    return add(d, scale(b, cfg.ce_weight))
