"""ViT-to-CNN projection, the two fusion rules and the multi-scale decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FUSION_MODES = ("npf", "pf")


@dataclass
class FusionConfig:
    mode: str = "npf"
    r1: float = 0.0
    r2: float = 1.0
    beta_infer: float = 0.5
    levels: int = 4  # levels above this cutoff keep the unfused CNN map
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if not 0.0 <= self.r1 < self.r2 <= 1.0:
            raise ValueError(f"need 0 <= r1 < r2 <= 1, got r1={self.r1}, r2={self.r2}")
        if not 0.0 <= self.beta_infer <= 1.0:
            raise ValueError(f"beta_infer must lie in [0, 1], got {self.beta_infer}")
        if self.levels < 0:
            raise ValueError("fusion levels must be non-negative")


@dataclass
class PredictionBundle:
    final: torch.Tensor  # P, (B, K, H, W)
    scale_preds: list[torch.Tensor] = field(default_factory=list)  # Q_1..Q_{N-1}, coarser each step
    cnn_pred: torch.Tensor | None = None  # R
    beta: float | None = None

    def all_maps(self) -> list[torch.Tensor]:
        maps = [self.final, *self.scale_preds]
        if self.cnn_pred is not None:
            maps.append(self.cnn_pred)
        return maps


def sample_beta(config: FusionConfig, rng: np.random.Generator) -> float:
    if config.mode != "npf":
        raise ValueError("beta is only sampled for non-parametric fusion")
    return float(rng.uniform(config.r1, config.r2))


def fuse_npf(f_cnn: torch.Tensor, f_vit: torch.Tensor, beta: float) -> torch.Tensor:
    """Random convex combination ``beta * f_cnn + (1 - beta) * f_vit``."""
    if f_cnn.shape != f_vit.shape:
        raise ValueError(f"cannot fuse CNN map {tuple(f_cnn.shape)} with ViT map {tuple(f_vit.shape)}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    # endpoints return the branch itself so they hold bit-exactly (signed zeros included)
    if beta == 1.0:
        return f_cnn
    if beta == 0.0:
        return f_vit
    return beta * f_cnn + (1.0 - beta) * f_vit


class ViTProjector(nn.Module):
    """Bilinear resize to the CNN level's grid, then a 1x1 projection to its width."""

    def __init__(self, align_dim, out_channels, size):
        super().__init__()
        self.size = tuple(size)
        self.proj = nn.Conv2d(align_dim, out_channels, 1)

    def forward(self, z):
        if tuple(z.shape[-2:]) != self.size:
            z = F.interpolate(z, size=self.size, mode="bilinear", align_corners=True)
        return self.proj(z)


def project_vit_to_scale(z: torch.Tensor, projector: ViTProjector) -> torch.Tensor:
    return projector(z)


class ChannelAttentionFusion(nn.Module):
    """Cross-covariance (channel) attention over the concatenated branches.

    Q, K, V are 1x1 convolutions of ``LayerNorm([f_cnn, f_vit])``; the
    ``2C x 2C`` channel affinity ``K^T Q / alpha`` is softmax-normalised over
    its first axis, so every column is a convex weighting of value channels.
    """

    def __init__(self, channels, alpha_init=1.0):
        super().__init__()
        c2 = 2 * channels
        self.norm = nn.LayerNorm(c2)
        self.q = nn.Conv2d(c2, c2, 1)
        self.k = nn.Conv2d(c2, c2, 1)
        self.v = nn.Conv2d(c2, c2, 1)
        self.out = nn.Conv2d(c2, channels, 1)
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))

    def _qkv(self, f_cnn, f_vit):
        if f_cnn.shape != f_vit.shape:
            raise ValueError(f"cannot fuse CNN map {tuple(f_cnn.shape)} with ViT map {tuple(f_vit.shape)}")
        x = torch.cat([f_cnn, f_vit], dim=1)
        x = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        q = self.q(x).flatten(2).transpose(1, 2)  # (B, HW, 2C)
        k = self.k(x).flatten(2)  # (B, 2C, HW)
        v = self.v(x).flatten(2).transpose(1, 2)  # (B, HW, 2C)
        return q, k, v

    def channel_logits(self, f_cnn, f_vit):
        q, k, _ = self._qkv(f_cnn, f_vit)
        return (k @ q) / self.alpha

    def attention_weights(self, f_cnn, f_vit):
        return torch.softmax(self.channel_logits(f_cnn, f_vit), dim=1)

    def forward(self, f_cnn, f_vit):
        b, c, h, w = f_cnn.shape
        q, k, v = self._qkv(f_cnn, f_vit)
        attn = torch.softmax((k @ q) / self.alpha, dim=1)
        mixed = (v @ attn).transpose(1, 2).reshape(b, 2 * c, h, w)
        return self.out(mixed)


def fuse_pf(f_cnn: torch.Tensor, f_vit: torch.Tensor, module: ChannelAttentionFusion) -> torch.Tensor:
    return module(f_cnn, f_vit)


class MultiScaleDecoder(nn.Module):
    """One 3x3 head per level over a light top-down trunk.

    ``D_N = F_N`` and ``D_j = F_j + lateral_j(up(D_{j+1}))``; level 1 gives P,
    level s+1 gives Q_s. A head never sees finer levels than its own. With
    ``top_down=False`` every head reads its own fused map only.
    """

    def __init__(self, channels, num_classes=2, top_down=True):
        super().__init__()
        self.top_down = top_down
        self.heads = nn.ModuleList([nn.Conv2d(c, num_classes, 3, padding=1) for c in channels])
        self.laterals = nn.ModuleList(
            [nn.Conv2d(channels[j + 1], channels[j], 1) for j in range(len(channels) - 1)]
        )

    def forward(self, fused: list[torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        n = len(fused)
        if not 1 <= n <= len(self.heads):
            raise ValueError(f"decoder built for up to {len(self.heads)} levels, got {n}")
        trunk = [None] * n
        trunk[-1] = fused[-1]
        for j in range(n - 2, -1, -1):
            if self.top_down:
                up = F.interpolate(trunk[j + 1], size=fused[j].shape[-2:], mode="bilinear",
                                   align_corners=False)
                trunk[j] = fused[j] + self.laterals[j](up)
            else:
                trunk[j] = fused[j]
        probs = [torch.softmax(self.heads[j](trunk[j]), dim=1) for j in range(n)]
        return probs[0], probs[1:]


def decode(fused: list[torch.Tensor], decoder: MultiScaleDecoder, cnn_pred=None, beta=None) -> PredictionBundle:
    final, scales = decoder(fused)
    return PredictionBundle(final, scales, cnn_pred, beta)
