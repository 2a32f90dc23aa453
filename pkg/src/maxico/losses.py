"""Dice + cross-entropy, the multi-scale supervised loss, the unsupervised
vote loss and the Gaussian warm-up that mixes them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .fusion import PredictionBundle

DICE_SMOOTH = 1e-5
LOG_EPS = 1e-12


DOWNSAMPLE_MODES = ("area", "nearest")


@dataclass
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.6
    lambda_max: float = 1.0
    warmup_steps: int | None = None  # None: 30% of the run, resolved by TrainConfig
    target_downsample: str = "area"  # "area" or "nearest", for the per-scale targets

    def __post_init__(self):
        if self.target_downsample not in DOWNSAMPLE_MODES:
            raise ValueError(f"target_downsample must be one of {DOWNSAMPLE_MODES}")
        for name in ("alpha1", "alpha2", "alpha3", "lambda_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.warmup_steps is not None and self.warmup_steps < 1:
            raise ValueError("warmup_steps must be a positive integer")


def _as_probabilities(target: torch.Tensor, num_classes: int, like: torch.Tensor) -> torch.Tensor:
    if target.dtype in (torch.int64, torch.int32, torch.uint8):
        if target.shape != like.shape[:1] + like.shape[2:]:
            raise ValueError(f"hard target {tuple(target.shape)} does not match prediction {tuple(like.shape)}")
        if target.min() < 0 or target.max() >= num_classes:
            raise ValueError(f"class ids must lie in [0, {num_classes})")
        return F.one_hot(target.long(), num_classes).permute(0, 3, 1, 2).to(like.dtype)
    if target.shape != like.shape:
        raise ValueError(f"soft target {tuple(target.shape)} does not match prediction {tuple(like.shape)}")
    return target.to(like.dtype)


def dice_ce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``0.5 * Dice loss + 0.5 * CE`` for a (B, K, H, W) probability map.

    ``target`` is either (B, H, W) class ids or a (B, K, H, W) probability map
    used as-is. Dice sums run over batch and pixels per class and the class
    losses are averaged; CE is the mean over pixels of ``-sum_k t log p``.
    """
    sums = pred.sum(dim=1)
    if (sums - 1).abs().max() > 1e-4:
        raise ValueError("prediction is not normalised over the class axis")
    t = _as_probabilities(target, pred.shape[1], pred)
    dims = (0, 2, 3)
    inter = (pred * t).sum(dims)
    dice = (2 * inter + DICE_SMOOTH) / (pred.sum(dims) + t.sum(dims) + DICE_SMOOTH)
    dice_loss = (1 - dice).mean()
    ce = -(t * torch.log(pred.clamp_min(LOG_EPS))).sum(dim=1).mean()
    return 0.5 * dice_loss + 0.5 * ce


def downsample_target(target: torch.Tensor, size, num_classes: int, mode: str = "area") -> torch.Tensor:
    """Bring a target to ``size`` for a coarse prediction head.

    ``area`` gives each coarse cell its class fractions, so hard (B, H, W) ids
    become soft (B, K, h, w) maps and objects smaller than a cell are not lost.
    ``nearest`` keeps hard labels hard by sampling one pixel per cell.
    """
    if tuple(target.shape[-2:]) == tuple(size):
        return target
    if mode == "nearest":
        if target.dim() == 3:
            return F.interpolate(target[:, None].float(), size=size, mode="nearest")[:, 0].to(target.dtype)
        return F.interpolate(target, size=size, mode="nearest")
    if target.dim() == 3:
        target = F.one_hot(target.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())
    return F.adaptive_avg_pool2d(target, size)


def multiscale_supervised_loss(bundle: PredictionBundle, target: torch.Tensor, w: LossWeights,
                               multi_scale: bool = True) -> torch.Tensor:
    """``a1 L(P,T) + a2 L(R,T) + a3 mean_s L(Q_s,T)``; only ``a1 L(P,T)`` when ``multi_scale`` is off."""
    loss = w.alpha1 * dice_ce(bundle.final, target)
    if not multi_scale:
        return loss
    if bundle.cnn_pred is not None:
        loss = loss + w.alpha2 * dice_ce(bundle.cnn_pred, target)
    if bundle.scale_preds:
        per_scale = []
        for q in bundle.scale_preds:
            t = downsample_target(target, q.shape[-2:], q.shape[1], w.target_downsample)
            per_scale.append(dice_ce(q, t.to(q.dtype) if t.is_floating_point() else t))
        loss = loss + w.alpha3 * torch.stack(per_scale).mean()
    return loss


def unsupervised_loss(outputs: list[torch.Tensor], pseudo: torch.Tensor) -> torch.Tensor:
    if not outputs:
        raise ValueError("unsupervised loss needs at least one contributor")
    return torch.stack([dice_ce(p, pseudo) for p in outputs]).mean()


def lambda_schedule(t: float, w: LossWeights) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    if w.warmup_steps is None:
        raise ValueError("warmup_steps is unset")
    phase = 1.0 - min(t / w.warmup_steps, 1.0)
    return w.lambda_max * math.exp(-5.0 * phase * phase)


def final_loss(l_sup: torch.Tensor, l_unsup: torch.Tensor, t: float, w: LossWeights) -> torch.Tensor:
    if not torch.isfinite(l_sup) or not torch.isfinite(l_unsup):
        raise FloatingPointError(f"non-finite loss term (sup={float(l_sup)}, unsup={float(l_unsup)})")
    return l_sup + lambda_schedule(t, w) * l_unsup
