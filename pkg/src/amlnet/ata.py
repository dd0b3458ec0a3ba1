"""Discriminator-to-generator leakage.

``AtaModule`` builds a position-similarity attention map from a discriminator
feature map and adds the attention-aggregated Value, scaled by a learned
``alpha`` that starts at zero, to a generator feature map. The other
connectors in this file are the ablation alternatives.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .numerics import assert_finite, bilinear_resize, position_softmax

MAX_POSITIONS = 4096

CONNECTIONS = ("ata", "add", "concat", "conv1x1", "se", "sta", "none")


@dataclass
class AtaOutput:
    fused: torch.Tensor
    attention: Optional[torch.Tensor] = None  # (N, HW, HW), rows sum to 1


def _align(d_feat: torch.Tensor, g_feat: torch.Tensor) -> torch.Tensor:
    # strided discriminator convs can land one pixel off the pooled encoder grid
    h, w = g_feat.shape[-2:]
    return bilinear_resize(d_feat, h, w)


class Connector(nn.Module):
    """Base for every leak connector: ``forward(d_feat, g_feat) -> AtaOutput``."""

    def __init__(self, channels: int, d_channels: Optional[int] = None):
        super().__init__()
        self.channels = channels
        d_channels = channels if d_channels is None else d_channels
        self.d_channels = d_channels
        self.adapt = nn.Conv2d(d_channels, channels, 1) if d_channels != channels else None

    def _prepare(self, d_feat: torch.Tensor, g_feat: torch.Tensor) -> torch.Tensor:
        if g_feat.shape[1] != self.channels:
            raise ValueError(
                f"generator feature has {g_feat.shape[1]} channels, expected {self.channels}"
            )
        if d_feat.shape[1] != self.d_channels:
            raise ValueError(
                f"discriminator feature has {d_feat.shape[1]} channels, expected {self.d_channels}"
            )
        if d_feat.shape[0] != g_feat.shape[0]:
            raise ValueError("batch sizes of discriminator and generator features differ")
        d_feat = _align(d_feat, g_feat)
        if self.adapt is not None:
            d_feat = self.adapt(d_feat)
        return d_feat


class AtaModule(Connector):
    """Attention from discriminator features into a generator feature map.

    With ``query_source="generator"`` the Query comes from the generator map
    instead, which gives the source-target-attention ablation.
    """

    def __init__(self, channels: int, d_channels: Optional[int] = None,
                 query_source: str = "discriminator"):
        if channels % 8:
            raise ValueError(f"channel count must be divisible by 8, got {channels}")
        super().__init__(channels, d_channels)
        if query_source not in ("discriminator", "generator"):
            raise ValueError(f"unknown query source {query_source!r}")
        self.query_source = query_source
        self.query = nn.Conv2d(channels, channels // 8, 1)
        self.key = nn.Conv2d(channels, channels // 8, 1)
        self.value = nn.Conv2d(channels, channels // 2, 1)
        self.out = nn.Conv2d(channels // 2, channels, 1)
        self.alpha = nn.Parameter(torch.zeros(()))

    def attention_weights(self, d_feat: torch.Tensor,
                          q_feat: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Row-stochastic (N, HW, HW) matrix; row i is the softmax over j of Query_i . Key_j."""
        if d_feat.shape[1] != self.channels:
            raise ValueError(
                f"attention input has {d_feat.shape[1]} channels, expected {self.channels}"
            )
        n, _, h, w = d_feat.shape
        if h * w > MAX_POSITIONS:
            raise ValueError(f"{h}x{w} positions exceed the attention cap of {MAX_POSITIONS}")
        q_src = d_feat if q_feat is None else q_feat
        q = self.query(q_src).reshape(n, -1, h * w)
        k = self.key(d_feat).reshape(n, -1, h * w)
        return position_softmax(q.transpose(1, 2) @ k)

    def forward(self, d_feat: torch.Tensor, g_feat: torch.Tensor,
                return_attention: bool = False) -> AtaOutput:
        d_feat = self._prepare(d_feat, g_feat)
        n, c, h, w = g_feat.shape
        q_feat = g_feat if self.query_source == "generator" else None
        attn = self.attention_weights(d_feat, q_feat)
        v = self.value(d_feat).reshape(n, c // 2, h * w)
        agg = (v @ attn.transpose(1, 2)).reshape(n, c // 2, h, w)
        fused = self.alpha * self.out(agg) + g_feat
        assert_finite(fused, "ATA output")
        return AtaOutput(fused, attn if return_attention else None)


class AddConnector(Connector):
    def forward(self, d_feat, g_feat, return_attention=False):
        return AtaOutput(g_feat + self._prepare(d_feat, g_feat))


class Conv1x1Connector(Connector):
    def __init__(self, channels, d_channels=None):
        super().__init__(channels, d_channels)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, d_feat, g_feat, return_attention=False):
        return AtaOutput(g_feat + self.proj(self._prepare(d_feat, g_feat)))


class ConcatConnector(Connector):
    def __init__(self, channels, d_channels=None):
        super().__init__(channels, d_channels)
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, d_feat, g_feat, return_attention=False):
        d = self._prepare(d_feat, g_feat)
        return AtaOutput(self.proj(torch.cat([g_feat, d], dim=1)))


class SEConnector(Connector):
    """Channel gate computed from the pooled discriminator map."""

    def __init__(self, channels, d_channels=None, reduction: int = 8):
        super().__init__(channels, d_channels)
        hidden = max(channels // reduction, 1)
        self.gate = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, channels), nn.Sigmoid(),
        )

    def forward(self, d_feat, g_feat, return_attention=False):
        d = self._prepare(d_feat, g_feat)
        g = self.gate(d.mean(dim=(2, 3)))
        return AtaOutput(g_feat * g[:, :, None, None])


class NoConnector(Connector):
    def forward(self, d_feat, g_feat, return_attention=False):
        return AtaOutput(g_feat)


def make_connector(kind: str, channels: int, d_channels: Optional[int] = None) -> Connector:
    if kind == "ata":
        return AtaModule(channels, d_channels)
    if kind == "sta":
        return AtaModule(channels, d_channels, query_source="generator")
    table = {
        "add": AddConnector,
        "conv1x1": Conv1x1Connector,
        "concat": ConcatConnector,
        "se": SEConnector,
        "none": NoConnector,
    }
    if kind not in table:
        raise ValueError(f"unknown connection mode {kind!r}; choose from {CONNECTIONS}")
    return table[kind](channels, d_channels)
