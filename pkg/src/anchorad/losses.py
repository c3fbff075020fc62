"""Alignment (BCE + Dice + Focal) and disentangle objectives.

Every loss accepts either a single example or a leading batch dimension and
reduces by the mean over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

LOG_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0
    # Dice on an all-normal image can only fall by emptying the whole map, which
    # swamps the localization signal; by default it is averaged over defect images.
    dice_empty_masks: bool = False

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(LOG_EPS, 1.0 - LOG_EPS))


def bce_loss(p_cls: torch.Tensor, y) -> torch.Tensor:
    """-log p_cls[y] with the probability clamped to [eps, 1 - eps]."""
    p = p_cls.unsqueeze(0) if p_cls.dim() == 1 else p_cls
    y = torch.as_tensor(y, device=p.device).long().reshape(-1)
    picked = p.gather(1, y.unsqueeze(1)).squeeze(1)
    return -_safe_log(picked).mean()


def dice_loss(p_anomaly: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p S) + s) / (sum p + sum S + s) per image, batch mean."""
    if p_anomaly.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(p_anomaly.shape)} vs {tuple(mask.shape)}")
    p = p_anomaly.reshape(-1, *p_anomaly.shape[-2:]).flatten(1)
    s = mask.reshape(p.shape).to(p.dtype)
    inter = (p * s).sum(1)
    return (1.0 - (2.0 * inter + smooth) / (p.sum(1) + s.sum(1) + smooth)).mean()


def defect_dice_loss(p_anomaly: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """dice_loss averaged over the images whose mask is non-empty (zero if there are none)."""
    if p_anomaly.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(p_anomaly.shape)} vs {tuple(mask.shape)}")
    p = p_anomaly.reshape(-1, *p_anomaly.shape[-2:])
    s = mask.reshape(p.shape)
    keep = s.flatten(1).sum(1) > 0
    if not bool(keep.any()):
        return p.sum() * 0.0
    return dice_loss(p[keep], s[keep], smooth)


def focal_loss(p_seg: torch.Tensor, mask: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Pixel mean of -alpha_t (1 - p_t)^g log p_t for a (..., H, W, 2) map."""
    if p_seg.shape[:-1] != mask.shape or p_seg.shape[-1] != 2:
        raise ValueError(f"shape mismatch: {tuple(p_seg.shape)} vs {tuple(mask.shape)}")
    s = mask.to(p_seg.dtype)
    p_t = torch.where(s > 0, p_seg[..., 1], p_seg[..., 0])
    alpha_t = torch.where(s > 0, torch.full_like(s, weights.focal_alpha),
                          torch.full_like(s, 1.0 - weights.focal_alpha))
    return (-alpha_t * (1.0 - p_t) ** weights.focal_gamma * _safe_log(p_t)).mean()


def disentangle_loss(t_n: torch.Tensor, t_a: torch.Tensor) -> torch.Tensor:
    """Squared inner product of the normal and anomaly anchors (batch mean)."""
    return ((t_n * t_a).sum(-1) ** 2).mean()


def total_loss(p_cls, y, p_seg, mask, anchors=None, weights: LossWeights = LossWeights()):
    """L_cls + Dice + Focal (+ gamma * L_dis when ``anchors`` is given).

    ``anchors`` is a (..., 2, d) tensor of (T_N, T_A) pairs, one per sample or
    one per class.  Returns the scalar total and a float breakdown.
    """
    dice = dice_loss if weights.dice_empty_masks else defect_dice_loss
    terms = {
        "bce": bce_loss(p_cls, y),
        "dice": dice(p_seg[..., 1], mask, weights.dice_smooth),
        "focal": focal_loss(p_seg, mask, weights),
    }
    total = terms["bce"] + terms["dice"] + terms["focal"]
    if anchors is not None:
        terms["dis"] = disentangle_loss(anchors[..., 0, :], anchors[..., 1, :])
        total = total + weights.gamma * terms["dis"]
    else:
        terms["dis"] = torch.zeros((), dtype=total.dtype)
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
