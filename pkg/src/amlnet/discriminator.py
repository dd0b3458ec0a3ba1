"""Conditional PatchGAN discriminator.

Six convolutions: a 3x3 stride-1 stem on the (image, segmentation) pair, four
spectrally normalized 4x4 stride-2 convs (levels 1..4), and a 1x1 conv to one
channel of patch logits. Each logit judges an aligned 16x16 input patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import SNConv2d, bilinear_resize
from .pda import apply_attention, check_mask

NUM_STRIDED = 4


@dataclass
class DiscConfig:
    image_channels: int = 3
    num_classes: int = 3
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    taps: tuple[int, ...] = (1, 2, 3)
    slope: float = 0.2

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.taps = tuple(self.taps)
        if len(self.widths) != NUM_STRIDED + 1:
            raise ValueError(f"need {NUM_STRIDED + 1} widths (stem + strided layers)")
        for t in self.taps:
            if not 0 <= t <= NUM_STRIDED:
                raise ValueError(f"tap level {t} outside 0..{NUM_STRIDED}")

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.num_classes

    @property
    def patch_output_stride(self) -> int:
        return 2 ** NUM_STRIDED

    @classmethod
    def from_base(cls, base: int, **kw) -> "DiscConfig":
        widths = tuple(min(base * 2 ** k, base * 8) for k in range(NUM_STRIDED + 1))
        return cls(widths=widths, **kw)


@dataclass
class DiscTrace:
    patch_logits: torch.Tensor
    tapped_feats: dict = field(default_factory=dict)  # level -> tensor


def _pad_for_ceil(x: torch.Tensor) -> torch.Tensor:
    # 4x4/stride-2 with this padding yields ceil(H/2) x ceil(W/2)
    h, w = x.shape[-2:]
    return F.pad(x, (1, 1 + w % 2, 1, 1 + h % 2))


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.strided = nn.ModuleList(
            SNConv2d(w[k], w[k + 1], 4, stride=2) for k in range(NUM_STRIDED)
        )
        self.classify = nn.Conv2d(w[-1], 1, 1)

    def spectral_layers(self) -> list:
        return list(self.strided)

    def forward(self, img: torch.Tensor, seg: torch.Tensor,
                leaked: Optional[dict] = None) -> DiscTrace:
        if seg.shape[1] != self.cfg.num_classes:
            raise ValueError(
                f"segmentation has {seg.shape[1]} class channels, expected {self.cfg.num_classes}"
            )
        if img.shape[-2:] != seg.shape[-2:]:
            raise ValueError("image and segmentation differ in spatial size")
        leaked = leaked or {}
        slope = self.cfg.slope
        taps = {}
        x = F.leaky_relu(self.stem(torch.cat([img, seg], dim=1)), slope)
        if 0 in self.cfg.taps:
            taps[0] = x
        for i, conv in enumerate(self.strided):
            level = i + 1
            x = F.leaky_relu(conv(_pad_for_ceil(x)), slope)
            if level in leaked:
                attn = leaked[level]
                if attn.dim() == 3:
                    attn = attn.unsqueeze(1)
                x = apply_attention(x, bilinear_resize(attn, *x.shape[-2:]))
            if level in self.cfg.taps:
                taps[level] = x
        return DiscTrace(self.classify(x), taps)


def seg_to_disc_input(seg: torch.Tensor, num_classes: int,
                      dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Generator logits -> softmax probabilities; integer masks -> one-hot maps."""
    if seg.dtype.is_floating_point:
        if seg.dim() != 4 or seg.shape[1] != num_classes:
            raise ValueError(f"expected logits of shape (N, {num_classes}, H, W)")
        return torch.softmax(seg, dim=1)
    check_mask(seg, num_classes)
    return F.one_hot(seg.long(), num_classes).permute(0, 3, 1, 2).to(dtype)
