"""Generator-to-discriminator leakage through pixel-wise difficulty maps.

A small segmentation head on a decoder feature map predicts class
probabilities at input resolution. The difficulty of a pixel is one minus the
probability of its true class; resampled to the feature grid it becomes a
single-channel attention map that reweights features as ``feat * (1 + attn)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import bilinear_resize

PROB_FLOOR = 1e-12


@dataclass
class PdaOutput:
    attn: torch.Tensor        # (N, 1, H, W) in [0, 1]
    probs_full: torch.Tensor  # (N, K, H_in, W_in), softmax over K
    enhanced: Optional[torch.Tensor] = None


class PdaHead(nn.Module):
    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        if channels % 2:
            raise ValueError(f"PDA head needs an even channel count, got {channels}")
        self.reduce = nn.Sequential(
            nn.Conv2d(channels, channels // 2, 1),
            nn.BatchNorm2d(channels // 2),
            nn.ReLU(inplace=True),
        )
        self.classify = nn.Conv2d(channels // 2, num_classes, 1)
        self.num_classes = num_classes

    def probabilities(self, feat: torch.Tensor, input_size: tuple[int, int]) -> torch.Tensor:
        logits = self.classify(self.reduce(feat))
        return torch.softmax(bilinear_resize(logits, *input_size), dim=1)


def check_mask(mask: torch.Tensor, num_classes: int) -> None:
    bad = (mask < 0) | (mask >= num_classes)
    if bad.any():
        idx = tuple(int(i) for i in bad.nonzero()[0])
        raise ValueError(
            f"mask label {int(mask[idx])} at {idx} outside [0, {num_classes})"
        )


def true_class_prob(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    check_mask(mask, probs.shape[1])
    return probs.gather(1, mask.long().unsqueeze(1))


def _to_grid(difficulty: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return bilinear_resize(difficulty, *size).clamp(0.0, 1.0)


def difficulty_map(feat: torch.Tensor, mask: torch.Tensor, head: PdaHead,
                   input_size: tuple[int, int]) -> PdaOutput:
    probs = head.probabilities(feat, input_size)
    p_true = true_class_prob(probs, mask)
    return PdaOutput(_to_grid(1.0 - p_true, feat.shape[-2:]), probs)


def bottom_up_difficulty(feat: torch.Tensor, head: PdaHead,
                         input_size: tuple[int, int]) -> PdaOutput:
    """Ground-truth-free variant: difficulty is one minus the top-class confidence."""
    probs = head.probabilities(feat, input_size)
    conf = probs.amax(dim=1, keepdim=True)
    return PdaOutput(_to_grid(1.0 - conf, feat.shape[-2:]), probs)


def apply_attention(feat: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    if attn.dim() == 3:
        attn = attn.unsqueeze(1)
    if feat.shape[-2:] != attn.shape[-2:]:
        raise ValueError(
            f"attention map {tuple(attn.shape[-2:])} does not match feature map "
            f"{tuple(feat.shape[-2:])}"
        )
    return feat * attn + feat


def pda_aux_loss(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log p(true class), probabilities floored at 1e-12."""
    p_true = true_class_prob(probs, mask)
    return -p_true.clamp_min(PROB_FLOOR).log().mean()


def ce_loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return pda_aux_loss(F.softmax(logits, dim=1), mask)
