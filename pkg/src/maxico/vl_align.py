"""Dense vision-language alignment of ViT taps and a text embedding."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbones import TransformerBlock, VitTapSet


@dataclass
class AlignedFeatureSet:
    layers: tuple[int, ...]
    visual: list[torch.Tensor]  # X_i, (B, num_patches, d_align)
    text: list[torch.Tensor] | None  # Y_i, (B, d_align); None when text is disabled
    aligned: list[torch.Tensor]  # Z_i, (B, d_align, h, w)


class VisualAggregator(nn.Module):
    """Deepest-first aggregation with skip connections.

    ``X_l = T_l(W_l x_l)`` and ``X_i = T_i(W_i x_i + X_{i+1})`` for shallower taps.
    Entries of ``trans_layers`` may be swapped for ``nn.Identity`` in tests.
    """

    def __init__(self, vit_dim=64, align_dim=64, num_taps=4, heads=4):
        super().__init__()
        self.reduce = nn.ModuleList([nn.Linear(vit_dim, align_dim) for _ in range(num_taps)])
        self.trans_layers = nn.ModuleList([TransformerBlock(align_dim, heads) for _ in range(num_taps)])

    def forward(self, taps: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(taps) != len(self.reduce):
            raise ValueError(f"expected {len(self.reduce)} taps, got {len(taps)}")
        out = [None] * len(taps)
        deeper = None
        for i in range(len(taps) - 1, -1, -1):
            x = self.reduce[i](taps[i])
            if deeper is not None:
                if x.shape != deeper.shape:
                    raise ValueError(
                        f"reduced tap {i} has shape {tuple(x.shape)} but the deeper "
                        f"aggregate has shape {tuple(deeper.shape)}"
                    )
                x = x + deeper
            deeper = self.trans_layers[i](x)
            out[i] = deeper
        return out


class TextMLP(nn.Sequential):
    def __init__(self, cin, cout, hidden=None, bias=True):
        hidden = hidden or cout
        super().__init__(nn.Linear(cin, hidden, bias=bias), nn.GELU(), nn.Linear(hidden, cout, bias=bias))


class TextPropagator(nn.Module):
    """``Y_l = W_l y`` and ``Y_i = W_i Y_{i+1}``, each W a two-layer MLP."""

    def __init__(self, text_dim=64, align_dim=64, num_taps=4, bias=True):
        super().__init__()
        self.mlps = nn.ModuleList(
            [TextMLP(align_dim if i < num_taps - 1 else text_dim, align_dim, bias=bias)
             for i in range(num_taps)]
        )

    def forward(self, y: torch.Tensor) -> list[torch.Tensor]:
        if not torch.isfinite(y).all():
            raise ValueError("text embedding contains non-finite values")
        out = [None] * len(self.mlps)
        cur = y
        for i in range(len(self.mlps) - 1, -1, -1):
            cur = self.mlps[i](cur)
            out[i] = cur
        return out


def dense_align(x: torch.Tensor, y: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Reshape ``x`` (B, h*w, d) to (B, d, h, w) and scale every position by ``y`` (B, d)."""
    b, n, d = x.shape
    h, w = grid
    if n != h * w:
        raise ValueError(f"{n} patches cannot be reshaped to a {h}x{w} grid")
    if y.shape != (b, d):
        raise ValueError(f"text features of shape {tuple(y.shape)} do not broadcast over ({b}, {d}, {h}, {w})")
    return x.transpose(1, 2).reshape(b, d, h, w) * y[:, :, None, None]


class VisionLanguageAlign(nn.Module):
    def __init__(self, vit_dim=64, text_dim=64, align_dim=64, num_taps=4, heads=4):
        super().__init__()
        self.aggregate = VisualAggregator(vit_dim, align_dim, num_taps, heads)
        self.propagate = TextPropagator(text_dim, align_dim, num_taps)

    def forward(self, taps: VitTapSet, text: torch.Tensor | None) -> AlignedFeatureSet:
        xs = self.aggregate(taps.features)
        if text is None:
            ys = None
            zs = [dense_align(x, torch.ones_like(x[:, 0]), taps.grid) for x in xs]
        else:
            ys = self.propagate(text)
            zs = [dense_align(x, y, taps.grid) for x, y in zip(xs, ys)]
        return AlignedFeatureSet(taps.layers, xs, ys, zs)
