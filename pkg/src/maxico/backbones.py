"""Small, randomly initialised encoders: a tapped ViT, a bag-of-words text
encoder and a U-Net CNN branch."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

VIT_TAPS = (3, 6, 9, 12)
UNK = "<unk>"


def check_image_size(height: int, width: int, patch_size: int, num_levels: int) -> None:
    if height % patch_size or width % patch_size:
        raise ValueError(
            f"image size {height}x{width} is not divisible by the ViT patch size {patch_size}"
        )
    factor = 2 ** (num_levels - 1)
    if height % factor or width % factor:
        raise ValueError(
            f"image size {height}x{width} is not divisible by 2^(N-1)={factor} "
            f"required by a {num_levels}-level CNN pyramid"
        )


@dataclass
class VitTapSet:
    layers: tuple[int, ...]
    features: list[torch.Tensor]  # each (B, num_patches, d_vit)
    grid: tuple[int, int]

    def __post_init__(self):
        if len(self.layers) != len(self.features):
            raise ValueError("one feature array per tapped layer expected")
        if any(b <= a for a, b in zip(self.layers, self.layers[1:])):
            raise ValueError(f"tap layers must be strictly increasing, got {self.layers}")
        shapes = {tuple(f.shape) for f in self.features}
        if len(shapes) > 1:
            raise ValueError(f"all taps must share one shape, got {sorted(shapes)}")

    def __len__(self):
        return len(self.layers)


@dataclass
class CnnPyramid:
    features: list[torch.Tensor]  # level j -> (B, C_j, H/2^(j-1), W/2^(j-1))
    logits: torch.Tensor

    @property
    def prediction(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Standard pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim, heads=4, mlp_ratio=2.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module):
    def __init__(self, img_size=64, patch_size=8, dim=64, depth=12, heads=4,
                 taps=VIT_TAPS, num_levels=4):
        super().__init__()
        if max(taps) > depth:
            raise ValueError(f"tap layer {max(taps)} exceeds depth {depth}")
        check_image_size(img_size, img_size, patch_size, num_levels)
        self.img_size = img_size
        self.patch_size = patch_size
        self.num_levels = num_levels
        self.taps = tuple(taps)
        self.grid = (img_size // patch_size, img_size // patch_size)
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid[0] * self.grid[1], dim) * 0.02)
        self.blocks = nn.ModuleList([TransformerBlock(dim, heads) for _ in range(depth)])

    def forward(self, images: torch.Tensor) -> VitTapSet:
        _, c, h, w = images.shape
        if c != 3:
            raise ValueError(f"expected 3-channel images, got {c}")
        check_image_size(h, w, self.patch_size, self.num_levels)
        if (h, w) != (self.img_size, self.img_size):
            raise ValueError(
                f"positional embedding is sized for {self.img_size}x{self.img_size}, got {h}x{w}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2) + self.pos_embed
        taps = []
        for depth, block in enumerate(self.blocks, start=1):
            x = block(x)
            if depth in self.taps:
                taps.append(x)
        return VitTapSet(self.taps, taps, self.grid)


def tokenize(caption) -> list[str]:
    tokens = caption.lower().split() if isinstance(caption, str) else [str(t).lower() for t in caption]
    if not tokens:
        raise ValueError("caption must contain at least one token")
    return tokens


class TextEncoder(nn.Module):
    """Seeded embedding table, mean pooling and a fixed random projection.

    Out-of-vocabulary tokens map to the reserved ``<unk>`` id 0.
    """

    def __init__(self, vocab, embed_dim=32, out_dim=64, seed=0, frozen=True):
        super().__init__()
        self.vocab = [UNK] + [w for w in vocab if w != UNK]
        self.index = {w: i for i, w in enumerate(self.vocab)}
        gen = torch.Generator().manual_seed(seed)
        self.embedding = nn.Parameter(torch.randn(len(self.vocab), embed_dim, generator=gen))
        self.projection = nn.Parameter(
            torch.randn(embed_dim, out_dim, generator=gen) / math.sqrt(embed_dim)
        )
        if frozen:
            self.requires_grad_(False)

    def token_ids(self, caption) -> list[int]:
        return [self.index.get(t, 0) for t in tokenize(caption)]

    def forward(self, captions) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        pooled = torch.stack(
            [self.embedding[self.token_ids(c)].mean(dim=0) for c in captions]
        )
        return pooled @ self.projection


def _norm(channels):
    return nn.GroupNorm(min(4, channels), channels)


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, n_convs=2):
        layers = []
        for i in range(n_convs):
            layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1),
                       _norm(cout), nn.ReLU(inplace=True)]
        super().__init__(*layers)


class UNet(nn.Module):
    """U-Net whose decoder-side maps form the multi-scale pyramid.

    Level 1 is full resolution with ``channels[0]`` channels; level N is the
    bottleneck. ``forward`` returns every decoder level plus the branch logits.
    """

    def __init__(self, in_channels=3, channels=(16, 32, 64, 128), num_classes=2, n_convs=2):
        super().__init__()
        self.channels = tuple(channels)
        self.num_levels = len(channels)
        self.encoders = nn.ModuleList()
        prev = in_channels
        for c in channels:
            self.encoders.append(ConvBlock(prev, c, n_convs))
            prev = c
        self.decoders = nn.ModuleList(
            [ConvBlock(channels[j + 1] + channels[j], channels[j], n_convs)
             for j in range(self.num_levels - 1)]
        )
        self.head = nn.Conv2d(channels[0], num_classes, 1)

    def forward(self, images: torch.Tensor) -> CnnPyramid:
        h, w = images.shape[-2:]
        factor = 2 ** (self.num_levels - 1)
        if h % factor or w % factor:
            raise ValueError(f"image size {h}x{w} is not divisible by 2^(N-1)={factor}")
        skips = []
        x = images
        for j, enc in enumerate(self.encoders):
            if j:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        feats = [None] * self.num_levels
        feats[-1] = x
        for j in range(self.num_levels - 2, -1, -1):
            up = F.interpolate(x, size=skips[j].shape[-2:], mode="bilinear", align_corners=False)
            x = self.decoders[j](torch.cat([up, skips[j]], dim=1))
            feats[j] = x
        return CnnPyramid(feats, self.head(x))
