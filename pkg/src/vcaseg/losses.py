"""Training objective: focal term + log(1 - soft dice) + binary cross-entropy.

All terms are computed in float64 regardless of the input dtype; the
gradient returned by :func:`combined_loss` is cast back to the dtype of
``p``.

The three terms are normalised differently on purpose.  The focal sum is
divided by the pixel count N, the dice term is a single batch-level scalar,
and BCE is a per-pixel mean.  ``log(1 - DSC)`` is unbounded below as the
soft dice approaches 1, so it is clamped at ``log(eps_log)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    eps_dice: float = 1.0
    eps_log: float = 1e-7

    def validate(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.eps_dice <= 0 or self.eps_log <= 0:
            raise ConfigError("eps_dice and eps_log must be positive")
        return self


@dataclass
class LossBreakdown:
    focal: float
    dice_log: float
    bce: float
    total: float
    n_pixels: int


def _prep(p, y):
    p = np.asarray(p)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
    return p.astype(np.float64), y.astype(np.float64)


def _clamp(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(p, y, cfg=None):
    """``sum(-alpha_t (1 - p_t)**gamma log p_t) / N``."""
    cfg = cfg or LossConfig()
    p, y = _prep(p, y)
    pt = np.where(y > 0.5, _clamp(p), 1.0 - _clamp(p))
    at = np.where(y > 0.5, cfg.alpha, 1.0 - cfg.alpha)
    return float(np.sum(-at * (1.0 - pt) ** cfg.gamma * np.log(pt)) / p.size)


def soft_dice(p, y, eps_dice=1.0):
    p, y = _prep(p, y)
    return float((2.0 * np.sum(p * y) + eps_dice) / (np.sum(p) + np.sum(y) + eps_dice))


def dice_log_loss(p, y, cfg=None):
    cfg = cfg or LossConfig()
    return float(np.log(max(1.0 - soft_dice(p, y, cfg.eps_dice), cfg.eps_log)))


def bce(p, y):
    p, y = _prep(p, y)
    pc = _clamp(p)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))


def combined_loss(p, y, cfg=None):
    """Total loss and its gradient w.r.t. ``p``.

    Returns ``(LossBreakdown, grad)``.  Where a clamp is active the
    corresponding term contributes zero gradient.
    """
    cfg = cfg or LossConfig()
    dtype = np.asarray(p).dtype
    p, y = _prep(p, y)
    n = p.size
    pos = y > 0.5
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    pc = _clamp(p)

    # focal
    pt = np.where(pos, pc, 1.0 - pc)
    at = np.where(pos, cfg.alpha, 1.0 - cfg.alpha)
    one_m = 1.0 - pt
    logpt = np.log(pt)
    focal = float(np.sum(-at * one_m**cfg.gamma * logpt) / n)
    if cfg.gamma == 0:
        d_pt = -at / pt
    else:
        d_pt = at * (cfg.gamma * one_m ** (cfg.gamma - 1) * logpt - one_m**cfg.gamma / pt)
    g_focal = np.where(pos, d_pt, -d_pt) * inside / n

    # log(1 - soft dice)
    inter, s = np.sum(p * y), np.sum(p) + np.sum(y)
    num, den = 2.0 * inter + cfg.eps_dice, s + cfg.eps_dice
    dsc = num / den
    one_m_dsc = 1.0 - dsc
    if one_m_dsc > cfg.eps_log:
        dice_log = float(np.log(one_m_dsc))
        d_dsc = (2.0 * y * den - num) / (den * den)
        g_dice = -d_dsc / one_m_dsc
    else:
        dice_log = float(np.log(cfg.eps_log))
        g_dice = np.zeros_like(p)

    # BCE
    bce_v = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))
    g_bce = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside / n

    total = focal + dice_log + bce_v
    grad = (g_focal + g_dice + g_bce).astype(dtype)
    return LossBreakdown(focal, dice_log, bce_v, total, n), grad
