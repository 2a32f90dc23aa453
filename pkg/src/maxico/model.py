"""The full text-aware ViT-CNN fusion network."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbones import TextEncoder, ToyViT, UNet, check_image_size
from .data import CAPTION_VOCAB
from .fusion import (
    ChannelAttentionFusion,
    FusionConfig,
    MultiScaleDecoder,
    PredictionBundle,
    ViTProjector,
    fuse_npf,
)
from .vl_align import VisionLanguageAlign


@dataclass
class ModelConfig:
    img_size: int = 64
    patch_size: int = 8
    vit_dim: int = 64
    vit_depth: int = 12
    vit_heads: int = 4
    text_dim: int = 64
    align_dim: int = 64
    channels: tuple[int, ...] = (16, 32, 64, 128)
    num_classes: int = 2
    convs_per_block: int = 2
    freeze_vit: bool = True
    freeze_text: bool = True
    top_down: bool = True
    # ablation switches for the module study
    multi_scale_arch: bool = True
    text_enabled: bool = True
    vit_cnn_fusion: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        check_image_size(self.img_size, self.img_size, self.patch_size, len(self.channels))
        if len(self.channels) > 4:
            raise ValueError("at most 4 pyramid levels (one per ViT tap)")


class FusionSegNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, fusion: FusionConfig | None = None, seed=0):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.fusion = fusion = fusion or FusionConfig()
        n = len(config.channels)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.vit = ToyViT(config.img_size, config.patch_size, config.vit_dim, config.vit_depth,
                              config.vit_heads, num_levels=n)
            self.text_encoder = TextEncoder(CAPTION_VOCAB, out_dim=config.text_dim, seed=seed,
                                            frozen=config.freeze_text)
            self.align = VisionLanguageAlign(config.vit_dim, config.text_dim, config.align_dim,
                                             len(self.vit.taps), config.vit_heads)
            self.cnn = UNet(3, config.channels, config.num_classes, config.convs_per_block)
            sizes = [config.img_size // 2 ** j for j in range(n)]
            self.projectors = nn.ModuleList(
                [ViTProjector(config.align_dim, c, (s, s)) for c, s in zip(config.channels, sizes)]
            )
            if fusion.mode == "pf":
                # alpha starts at sqrt(H_j * W_j) so the channel logits begin O(1)
                self.pf = nn.ModuleList(
                    [ChannelAttentionFusion(c, alpha_init=float(s)) for c, s in zip(config.channels, sizes)]
                )
            self.decoder = MultiScaleDecoder(config.channels, config.num_classes, config.top_down)
        if config.freeze_vit:
            self.vit.requires_grad_(False)

    @property
    def num_levels(self):
        return len(self.config.channels)

    def forward(self, images: torch.Tensor, captions, beta: float | None = None) -> PredictionBundle:
        cfg = self.config
        fuse = cfg.vit_cnn_fusion
        if fuse and self.fusion.mode == "npf" and beta is None:
            raise ValueError("non-parametric fusion needs an explicit beta")
        with torch.set_grad_enabled(torch.is_grad_enabled() and not cfg.freeze_vit):
            taps = self.vit(images)
        text = None
        if cfg.text_enabled:
            text = self.text_encoder(captions).to(images.dtype)
        aligned = self.align(taps, text)
        levels = self.num_levels if cfg.multi_scale_arch else 1
        vit_maps = [self.projectors[j](aligned.aligned[j]) for j in range(levels)]
        cnn_pred = None
        if fuse:
            pyramid = self.cnn(images)
            cnn_pred = pyramid.prediction
            fused = []
            for j in range(levels):
                f_cnn = pyramid.features[j]
                if j >= self.fusion.levels:
                    fused.append(f_cnn)
                elif self.fusion.mode == "pf":
                    fused.append(self.pf[j](f_cnn, vit_maps[j]))
                else:
                    fused.append(fuse_npf(f_cnn, vit_maps[j], beta))
        else:
            fused = vit_maps
        final, scales = self.decoder(fused)
        return PredictionBundle(final, scales, cnn_pred, beta if fuse else None)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
