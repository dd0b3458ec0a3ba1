"""Two-pass mutual-leakage orchestration and the adversarial losses.

One training iteration is ``discriminator_step`` followed by
``generator_step``. Each step only ever updates its own side: the generator
step runs the discriminator in eval mode (no power-iteration advance) and
differentiates with respect to generator-side parameters only; the
discriminator step produces its fake samples under ``no_grad`` and restores
the generator's batch-norm statistics afterwards.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .discriminator import DiscConfig, PatchDiscriminator, seg_to_disc_input
from .generator import GeneratorConfig, GeneratorTrace, UNetGenerator
from .pda import ce_loss, pda_aux_loss

AML_MODES = ("aml", "ata_only", "pda_only", "baseline_unet", "pix2pix")


@dataclass
class AmlConfig:
    lambda_adv: float = 0.01
    mode: str = "aml"
    connection: str = "ata"
    difficulty: str = "topdown"
    pda_to_generator: bool = True
    pda_to_discriminator: bool = True
    literal_adv: bool = False

    def __post_init__(self):
        if self.mode not in AML_MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {AML_MODES}")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be non-negative")

    @property
    def uses_ata(self) -> bool:
        return self.mode in ("aml", "ata_only")

    @property
    def uses_pda(self) -> bool:
        return self.mode in ("aml", "pda_only")

    @property
    def uses_disc(self) -> bool:
        return self.mode != "baseline_unet"


@dataclass
class LossBundle:
    l_ce: torch.Tensor
    l_pda1: torch.Tensor
    l_pda2: torch.Tensor
    l_pda3: torch.Tensor
    l_adv_g: torch.Tensor
    total: torch.Tensor
    l_disc: Optional[torch.Tensor] = None

    def as_dict(self) -> dict:
        out = {k: float(getattr(self, k).detach()) for k in
               ("l_ce", "l_pda1", "l_pda2", "l_pda3", "l_adv_g", "total")}
        out["l_disc"] = None if self.l_disc is None else float(self.l_disc)
        return out


def combine_losses(l_ce, pda_terms, l_adv_g, lambda_adv: float) -> torch.Tensor:
    # fixed left-to-right accumulation so the total is bitwise reproducible
    total = l_ce
    for t in pda_terms:
        total = total + t
    return total + lambda_adv * l_adv_g


def build_models(gen_cfg: GeneratorConfig, disc_cfg: DiscConfig,
                 aml_cfg: AmlConfig) -> tuple[UNetGenerator, PatchDiscriminator]:
    """Instantiate G and D with the leak sites the mode calls for."""
    gen_cfg = GeneratorConfig(**{
        **gen_cfg.__dict__,
        "ata_sites": gen_cfg.ata_sites if aml_cfg.uses_ata else (),
        "pda_stages": gen_cfg.pda_stages if aml_cfg.uses_pda else (),
        "connection": aml_cfg.connection,
        "difficulty": aml_cfg.difficulty,
        "pda_to_generator": aml_cfg.pda_to_generator,
    })
    missing = [k for k in gen_cfg.ata_sites if k not in disc_cfg.taps]
    if missing:
        raise ValueError(f"ATA sites {missing} have no discriminator tap")
    disc_channels = {k: disc_cfg.widths[k] for k in gen_cfg.ata_sites}
    G = UNetGenerator(gen_cfg, disc_channels)
    D = PatchDiscriminator(disc_cfg)
    return G, D


def adversarial_g_loss(patch_logits: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """Generator side of the adversarial game.

    Default is the non-saturating surrogate, BCE of the logits against
    "real". ``literal=True`` returns mean log(1 - D) instead, which the
    generator minimizes directly.
    """
    if literal:
        return -F.softplus(patch_logits).mean()
    return F.binary_cross_entropy_with_logits(patch_logits, torch.ones_like(patch_logits))


def disc_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


@contextlib.contextmanager
def frozen(module: nn.Module):
    """Block gradient accumulation into ``module``'s parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


@contextlib.contextmanager
def eval_mode(module: nn.Module):
    was = module.training
    module.eval()
    try:
        yield
    finally:
        module.train(was)


@contextlib.contextmanager
def preserved_buffers(module: nn.Module):
    saved = [b.detach().clone() for b in module.buffers()]
    try:
        yield
    finally:
        with torch.no_grad():
            for b, s in zip(module.buffers(), saved):
                b.copy_(s)


def generate(img: torch.Tensor, mask: torch.Tensor, G: UNetGenerator,
             D: PatchDiscriminator, cfg: AmlConfig,
             return_attention: bool = False) -> GeneratorTrace:
    """Run the generator the way the mode prescribes and return the final trace.

    In ATA modes this is first pass, discriminator on the first-pass output
    (gradient blocked into D's parameters), then the second pass fed with the
    tapped discriminator features.
    """
    if cfg.uses_ata:
        first = G(img, "first_pass")
        with frozen(D):
            d1 = D(img, seg_to_disc_input(first.logits, G.cfg.num_classes))
        return G(img, "second_pass", ata_inputs=d1.tapped_feats, gt=mask,
                 return_attention=return_attention)
    if cfg.uses_pda:
        return G(img, "second_pass", gt=mask)
    return G(img, "first_pass")


def _leaked(trace: GeneratorTrace, cfg: AmlConfig, detach: bool) -> Optional[dict]:
    if cfg.uses_pda and cfg.pda_to_discriminator:
        return trace.leaked_maps(detach=detach)
    return None


def generator_loss(img, mask, G, D, cfg: AmlConfig) -> tuple[LossBundle, GeneratorTrace]:
    with eval_mode(D):
        trace = generate(img, mask, G, D, cfg)
        zero = trace.logits.new_zeros(())
        l_ce = ce_loss(trace.logits, mask)
        pda = [pda_aux_loss(p, mask) for p in trace.pda_probs()] if cfg.uses_pda else []
        pda += [zero] * (3 - len(pda))
        if cfg.uses_disc:
            fake = seg_to_disc_input(trace.logits, G.cfg.num_classes)
            d2 = D(img, fake, leaked=_leaked(trace, cfg, detach=False))
            l_adv = adversarial_g_loss(d2.patch_logits, cfg.literal_adv)
        else:
            l_adv = zero
    total = combine_losses(l_ce, pda, l_adv, cfg.lambda_adv)
    return LossBundle(l_ce, pda[0], pda[1], pda[2], l_adv, total), trace


def generator_step(img, mask, G, D, cfg: AmlConfig, optimizer=None):
    """Compute the generator-side losses; with an optimizer, also update G.

    Gradients are taken with respect to G's parameters only, so nothing is
    written into the discriminator.
    """
    bundle, trace = generator_loss(img, mask, G, D, cfg)
    if optimizer is not None:
        params = optimizer.params
        grads = torch.autograd.grad(bundle.total, params, allow_unused=True)
        optimizer.step([torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)])
    return bundle, trace


def discriminator_loss(img, mask, G, D, cfg: AmlConfig) -> torch.Tensor:
    if not cfg.uses_disc:
        return img.new_zeros(())
    k = G.cfg.num_classes
    with torch.no_grad(), preserved_buffers(G), eval_mode(D):
        trace = generate(img, mask, G, D, cfg)
    leaked = _leaked(trace, cfg, detach=True)
    fake = seg_to_disc_input(trace.logits.detach(), k)
    real = seg_to_disc_input(mask, k, dtype=img.dtype)
    d_real = D(img, real, leaked=leaked)
    d_fake = D(img, fake, leaked=leaked)
    return disc_loss(d_real.patch_logits, d_fake.patch_logits)


def discriminator_step(img, mask, G, D, cfg: AmlConfig, optimizer=None) -> torch.Tensor:
    l_disc = discriminator_loss(img, mask, G, D, cfg)
    if optimizer is not None and cfg.uses_disc:
        params = optimizer.params
        grads = torch.autograd.grad(l_disc, params, allow_unused=True)
        optimizer.step([torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)])
    return l_disc
