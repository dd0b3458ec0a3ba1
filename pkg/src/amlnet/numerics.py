"""Numeric primitives shared by the attention modules and both networks.

Everything here operates on ``torch`` tensors laid out as (N, C, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn

SIGMA_FLOOR = 1e-12


def _first_bad_index(t: torch.Tensor) -> tuple[int, ...]:
    bad = (~torch.isfinite(t)).nonzero()
    return tuple(int(i) for i in bad[0])


def assert_finite(t: torch.Tensor, what: str = "tensor") -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite value in {what} at index {_first_bad_index(t)}")


def position_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with max-subtraction.

    Works on (rows, HW) matrices as well as batched (N, rows, HW) stacks.
    """
    assert_finite(logits, "softmax logits")
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def _axis_weights(n_in: int, n_out: int, dtype, device):
    src = (torch.arange(n_out, dtype=torch.float64, device=device) + 0.5) * (n_in / n_out) - 0.5
    src = src.clamp_min(0.0)
    i0 = src.floor().long().clamp_max(n_in - 1)
    i1 = (i0 + 1).clamp_max(n_in - 1)
    return i0, i1, (src - i0).to(dtype)


def bilinear_resize(t: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling with the align-corners=False (half-pixel) convention.

    Interpolates as ``a + l * (b - a)`` so constant regions stay bit-exact.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if t.dim() != 4:
        raise ValueError(f"expected a 4-d tensor, got shape {tuple(t.shape)}")
    in_h, in_w = t.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return t
    y0, y1, ly = _axis_weights(in_h, out_h, t.dtype, t.device)
    top, bot = t.index_select(2, y0), t.index_select(2, y1)
    rows = top + ly[:, None] * (bot - top)
    x0, x1, lx = _axis_weights(in_w, out_w, t.dtype, t.device)
    left, right = rows.index_select(3, x0), rows.index_select(3, x1)
    return left + lx * (right - left)


def _l2normalize(v: torch.Tensor) -> torch.Tensor:
    return v / (v.norm() + SIGMA_FLOOR)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, update: bool = True):
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` is viewed as (out, in*kh*kw). ``u`` is the persistent left vector;
    when ``update`` is set it is advanced by one iteration in place.
    Returns ``(normalized_weight, sigma)``.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        if update:
            v = _l2normalize(mat.t() @ u)
            u.copy_(_l2normalize(mat @ v))
        else:
            v = _l2normalize(mat.t() @ u)
    # clone: u is advanced in place by later forwards before backward runs
    sigma = torch.dot(u.clone(), mat @ v).clamp_min(SIGMA_FLOOR)
    return weight / sigma, sigma


class SNConv2d(nn.Conv2d):
    """Conv2d whose kernel is spectrally normalized on every forward.

    One power iteration runs per training-mode forward; eval mode reuses the
    stored vector so the layer is a pure function of its inputs.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        # exact top singular vector at init: random conv weights have a tiny spectral
        # gap, so plain power iteration would need hundreds of steps to settle
        mat = self.weight.detach().reshape(self.out_channels, -1)
        u = torch.linalg.svd(mat, full_matrices=False).U[:, 0]
        self.register_buffer("sn_u", _l2normalize(u.clone()))

    def normalized_weight(self) -> torch.Tensor:
        w, _ = spectral_normalize(self.weight, self.sn_u, update=False)
        return w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w, _ = spectral_normalize(self.weight, self.sn_u, update=self.training)
        return self._conv_forward(x, w, self.bias)


@dataclass
class GradCheckReport:
    max_relative_error: float
    parameter_count: int
    worst_param: int
    worst_index: tuple[int, ...]


def check_gradients(
    f: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients of ``f()`` against central differences.

    ``params`` must be double-precision leaf tensors that ``f`` closes over.
    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient checks need float64 parameters")
        p.requires_grad_(True)

    out = f()
    if out.numel() != 1:
        raise ValueError(f"f must return a scalar, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, params, allow_unused=True)

    worst = (0.0, 0, ())
    count = 0
    with torch.no_grad():
        for pi, (p, a) in enumerate(zip(params, analytic)):
            if a is None:
                a = torch.zeros_like(p)
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + epsilon
                plus = f().item()
                flat[k] = orig - epsilon
                minus = f().item()
                flat[k] = orig
                numeric = (plus - minus) / (2 * epsilon)
                an = a.reshape(-1)[k].item()
                err = abs(an - numeric) / max(abs(an), abs(numeric), 1e-8)
                if err > worst[0]:
                    worst = (err, pi, tuple(torch.unravel_index(torch.tensor(k), p.shape)))
                count += 1
    return GradCheckReport(
        max_relative_error=worst[0],
        parameter_count=count,
        worst_param=worst[1],
        worst_index=tuple(int(i) for i in worst[2]),
    )
