"""U-Net generator with optional leak sites.

Resolution levels are counted from the input: level ``k`` runs at 1/2**k of
the input size. Encoder levels 0..depth-1 hold a conv block followed by 2x2
max-pooling, level ``depth`` is the bottleneck, and decoder levels depth-1..0
upsample, concatenate the skip and run another conv block.

Connectors (ATA and its ablations) sit on encoder levels, after the block's
second convolution and before pooling. PDA heads sit on decoder levels
(the bottleneck counts as decoder level ``depth``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .ata import CONNECTIONS, make_connector
from .numerics import bilinear_resize
from .pda import PdaHead, PdaOutput, apply_attention, bottom_up_difficulty, difficulty_map

MODES = ("first_pass", "second_pass", "inference")


@dataclass
class GeneratorConfig:
    depth: int = 4
    base_channels: int = 64
    in_channels: int = 3
    num_classes: int = 3
    ata_sites: tuple[int, ...] = (1, 2, 3)
    pda_stages: tuple[int, ...] = (3, 2, 1)
    connection: str = "ata"
    difficulty: str = "topdown"   # or "bottomup"
    pda_to_generator: bool = True

    def __post_init__(self):
        self.ata_sites = tuple(self.ata_sites)
        self.pda_stages = tuple(self.pda_stages)
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if self.base_channels % 8:
            raise ValueError("base_channels must be divisible by 8")
        if self.pda_stages and len(self.pda_stages) != 3:
            raise ValueError("pda_stages must list exactly 3 decoder levels (or none)")
        if len(set(self.pda_stages)) != len(self.pda_stages):
            raise ValueError("pda_stages must be distinct")
        for s in self.pda_stages:
            if not 1 <= s <= self.depth:
                raise ValueError(f"PDA level {s} outside 1..{self.depth}")
        for s in self.ata_sites:
            if not 0 <= s < self.depth:
                raise ValueError(f"ATA site {s} outside encoder levels 0..{self.depth - 1}")
        if self.connection not in CONNECTIONS:
            raise ValueError(f"unknown connection {self.connection!r}")
        if self.difficulty not in ("topdown", "bottomup"):
            raise ValueError(f"unknown difficulty mode {self.difficulty!r}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


@dataclass
class GeneratorTrace:
    logits: torch.Tensor
    decoder_feats: dict = field(default_factory=dict)   # level -> tensor
    pda_outputs: dict = field(default_factory=dict)     # level -> PdaOutput
    ata_attention: dict = field(default_factory=dict)   # level -> (N, HW, HW)

    def leaked_maps(self, detach: bool = False) -> dict:
        """PDA attention maps keyed by level, ready to hand to the discriminator."""
        return {k: (o.attn.detach() if detach else o.attn) for k, o in self.pda_outputs.items()}

    def pda_probs(self) -> list:
        # deepest level first, matching the auxiliary loss numbering
        return [self.pda_outputs[k].probs_full for k in sorted(self.pda_outputs, reverse=True)]


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class Up(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.block = conv_block(2 * cout, cout)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = self.conv(bilinear_resize(x, *skip.shape[-2:]))
        return self.block(torch.cat([skip, x], dim=1))


class UNetGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, disc_channels: Optional[dict] = None):
        """``disc_channels`` maps an ATA level to the channel count of the tapped
        discriminator map; levels not listed are assumed to match the encoder."""
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.down = nn.ModuleList(
            conv_block(cfg.in_channels if k == 0 else ch(k - 1), ch(k)) for k in range(cfg.depth)
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = conv_block(ch(cfg.depth - 1), ch(cfg.depth))
        # up[k] takes level k+1 to level k
        self.up = nn.ModuleList(Up(ch(k + 1), ch(k)) for k in range(cfg.depth))
        self.head = nn.Conv2d(ch(0), cfg.num_classes, 1)

        disc_ch = disc_channels or {}
        self.leak = nn.ModuleDict({
            str(k): make_connector(cfg.connection, ch(k), disc_ch.get(k, ch(k)))
            for k in cfg.ata_sites
        })
        self.pda = nn.ModuleDict({
            str(k): PdaHead(ch(k), cfg.num_classes) for k in cfg.pda_stages
        })

    def _pda(self, level: int, feat, gt, input_size) -> PdaOutput:
        head = self.pda[str(level)]
        if self.cfg.difficulty == "bottomup":
            out = bottom_up_difficulty(feat, head, input_size)
        else:
            out = difficulty_map(feat, gt, head, input_size)
        out.enhanced = apply_attention(feat, out.attn) if self.cfg.pda_to_generator else feat
        return out

    def forward(self, img: torch.Tensor, mode: str = "inference",
                ata_inputs: Optional[dict] = None, gt: Optional[torch.Tensor] = None,
                return_attention: bool = False) -> GeneratorTrace:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        second = mode == "second_pass"
        if second and self.leak and ata_inputs is None:
            raise ValueError("second_pass needs discriminator features for the ATA sites")
        if second and self.pda and gt is None and self.cfg.difficulty == "topdown":
            raise ValueError("second_pass needs the ground-truth mask for the PDA heads")
        if img.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {img.shape[1]}")

        input_size = tuple(img.shape[-2:])
        trace = GeneratorTrace(logits=img)
        skips = []
        x = img
        for k, block in enumerate(self.down):
            x = block(x)
            if second and str(k) in self.leak:
                if k not in ata_inputs:
                    raise ValueError(f"missing discriminator feature for ATA site {k}")
                out = self.leak[str(k)](ata_inputs[k], x, return_attention=return_attention)
                x = out.fused
                if out.attention is not None:
                    trace.ata_attention[k] = out.attention
            skips.append(x)
            x = self.pool(x)

        x = self.bottleneck(x)
        x = self._decoder_site(self.cfg.depth, x, second, gt, input_size, trace)
        for k in reversed(range(self.cfg.depth)):
            x = self.up[k](x, skips[k])
            x = self._decoder_site(k, x, second, gt, input_size, trace)
        trace.logits = self.head(x)
        return trace

    def _decoder_site(self, level, x, second, gt, input_size, trace):
        trace.decoder_feats[level] = x
        if second and str(level) in self.pda:
            out = self._pda(level, x, gt, input_size)
            trace.pda_outputs[level] = out
            return out.enhanced
        return x
