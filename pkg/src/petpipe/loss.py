"""Class-weighted soft Dice + cross-entropy loss with an analytic gradient.

Class 0 is background, class 1 is lesion and classes 2..C-1 are anatomy.
The lesion class gets weight ``lam`` and every other class weight 1. The
same weights scale each voxel's cross-entropy (by its target class) and the
per-class soft Dice terms::

    CE   = 1/N * sum_v w[t_v] * -log p[t_v, v]
    Dice = sum_c w[c] * (1 - (2 I_c + eps) / (S_c + G_c + eps)) / sum_c w[c]

with I_c = sum_v p[c,v] y[c,v], S_c = sum_v p[c,v], G_c = sum_v y[c,v].
Logits and gradients are C x N arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError

LESION = 1


@dataclass(frozen=True)
class LossConfig:
    num_classes: int
    lam: float = 3.0
    dice_smooth: float = 1e-5
    dice_include_background: bool = True

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ParameterError(f"need at least 2 classes, got {self.num_classes}")
        if not self.lam > 0:
            raise ParameterError(f"lesion weight must be positive, got {self.lam}")
        if not self.dice_smooth > 0:
            raise ParameterError(f"dice smoothing must be positive, got {self.dice_smooth}")

    def class_weights(self) -> np.ndarray:
        w = np.ones(self.num_classes)
        w[LESION] = self.lam
        return w


def softmax_field(logits: np.ndarray) -> np.ndarray:
    """Per-voxel softmax over axis 0 with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _check(logits: np.ndarray, targets: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if z.ndim != 2 or z.shape[0] != num_classes:
        raise ParameterError(f"logits must be ({num_classes}, N), got {z.shape}")
    if t.shape != (z.shape[1],):
        raise ParameterError(f"targets must have shape ({z.shape[1]},), got {t.shape}")
    if z.shape[1] < 1:
        raise ParameterError("need at least one voxel")
    if not np.issubdtype(t.dtype, np.integer):
        raise ParameterError("targets must be integer labels")
    if t.min() < 0 or t.max() >= num_classes:
        raise ParameterError(f"target labels must lie in [0, {num_classes}), got max {t.max()}")
    if not np.isfinite(z).all():
        raise ParameterError("logits must be finite")
    return z, t


def dice_ce_terms(
    logits: np.ndarray,
    targets: np.ndarray,
    weights: Sequence[float],
    eps: float = 1e-5,
    include_background: bool = True,
) -> tuple[float, float, np.ndarray]:
    """CE term, Dice term and d(CE + Dice)/d(logits) for explicit class weights."""
    w = np.asarray(weights, dtype=np.float64)
    z, t = _check(logits, targets, w.size)
    c, n = z.shape
    p = softmax_field(z)
    y = np.zeros_like(p)
    y[t, np.arange(n)] = 1.0
    wv = w[t]

    logp = z - z.max(axis=0) - np.log(np.exp(z - z.max(axis=0)).sum(axis=0))
    ce = float(np.sum(wv * -logp[t, np.arange(n)]) / n)
    g_ce = (p - y) * (wv / n)

    dw = w.copy()
    if not include_background:
        dw[0] = 0.0
    wsum = dw.sum()
    inter = (p * y).sum(axis=1)
    denom = p.sum(axis=1) + y.sum(axis=1) + eps
    dice = (2 * inter + eps) / denom
    dice_loss = float(np.sum(dw * (1 - dice)) / wsum)
    # dL/dp, then back through the softmax Jacobian
    g_p = -(dw / wsum)[:, None] * (2 * y * denom[:, None] - (2 * inter + eps)[:, None]) / (denom**2)[:, None]
    g_dice = p * (g_p - (g_p * p).sum(axis=0, keepdims=True))
    return ce, dice_loss, g_ce + g_dice


def weighted_dice_ce(logits: np.ndarray, targets: np.ndarray, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``logits``."""
    ce, dice, grad = dice_ce_terms(
        logits, targets, cfg.class_weights(), cfg.dice_smooth, cfg.dice_include_background
    )
    return ce + dice, grad


def batch_dice_ce(
    logits: Sequence[np.ndarray], targets: Sequence[np.ndarray], cfg: LossConfig
) -> tuple[float, list[np.ndarray]]:
    """Mean loss over samples; each gradient is scaled by 1/batch size."""
    if len(logits) != len(targets) or not logits:
        raise ParameterError("batch needs equally many (non-zero) logits and targets")
    results = [weighted_dice_ce(z, t, cfg) for z, t in zip(logits, targets)]
    b = len(results)
    return sum(r[0] for r in results) / b, [r[1] / b for r in results]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    logits: np.ndarray,
    targets: np.ndarray,
    cfg: LossConfig,
    coords: Sequence[tuple[int, int]],
    step: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if len(coords) == 0:
        raise ParameterError("need at least one coordinate to check")
    z = np.array(logits, dtype=np.float64)
    _, grad = weighted_dice_ce(z, targets, cfg)
    worst = 0.0
    for c, v in coords:
        orig = z[c, v]
        z[c, v] = orig + step
        up, _ = weighted_dice_ce(z, targets, cfg)
        z[c, v] = orig - step
        down, _ = weighted_dice_ce(z, targets, cfg)
        z[c, v] = orig
        worst = max(worst, relative_error(grad[c, v], (up - down) / (2 * step)))
    return worst
