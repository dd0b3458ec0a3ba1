import math

import pytest
import torch

from amlnet.discriminator import DiscConfig, PatchDiscriminator, seg_to_disc_input
from amlnet.numerics import check_gradients
from amlnet.pda import apply_attention
from amlnet.trainer import Adam


def small_disc(**kw):
    return PatchDiscriminator(DiscConfig.from_base(8, **kw))


def seg(n, h, w, k=3):
    return torch.softmax(torch.randn(n, k, h, w), 1)


@pytest.mark.parametrize("size,expected", [(320, 20), (64, 4)])
def test_patch_grid(size, expected):
    D = small_disc()
    out = D(torch.randn(1, 3, size, size), seg(1, size, size))
    assert out.patch_logits.shape == (1, 1, expected, expected)


@pytest.mark.parametrize("h,w", [(16, 16), (17, 33), (31, 47), (50, 16), (129, 100)])
def test_output_stride_is_ceil_16(h, w):
    D = small_disc()
    out = D(torch.randn(1, 3, h, w), seg(1, h, w))
    assert out.patch_logits.shape[-2:] == (math.ceil(h / 16), math.ceil(w / 16))


def test_layer_plan():
    D = small_disc()
    convs = [m for m in D.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 6
    assert D.stem.kernel_size == (3, 3) and D.stem.stride == (1, 1)
    for c in D.strided:
        assert c.kernel_size == (4, 4) and c.stride == (2, 2)
    assert D.classify.kernel_size == (1, 1) and D.classify.out_channels == 1


def test_taps_have_encoder_resolutions():
    D = small_disc()
    out = D(torch.randn(2, 3, 64, 64), seg(2, 64, 64))
    assert {k: tuple(v.shape) for k, v in out.tapped_feats.items()} == {
        1: (2, 16, 32, 32), 2: (2, 32, 16, 16), 3: (2, 64, 8, 8)}


def test_zero_leaked_maps_change_nothing():
    D = small_disc().eval()
    x, s = torch.randn(1, 3, 64, 64), seg(1, 64, 64)
    leaked = {k: torch.zeros(1, 1, 64 >> k, 64 >> k) for k in (1, 2, 3)}
    a, b = D(x, s), D(x, s, leaked=leaked)
    assert torch.equal(a.patch_logits, b.patch_logits)
    for k in a.tapped_feats:
        assert torch.equal(a.tapped_feats[k], b.tapped_feats[k])


def test_leaked_maps_are_resized_and_used():
    D = small_disc().eval()
    x, s = torch.randn(1, 3, 60, 60), seg(1, 60, 60)
    leaked = {2: torch.ones(1, 1, 16, 16)}
    out = D(x, s, leaked=leaked)
    base = D(x, s)
    assert torch.allclose(out.tapped_feats[2], 2 * base.tapped_feats[2])


def test_class_count_mismatch():
    D = small_disc()
    with pytest.raises(ValueError, match="class channels"):
        D(torch.randn(1, 3, 32, 32), seg(1, 32, 32, k=4))


def test_spectral_bound_every_training_forward():
    D = small_disc().train()
    x, s = torch.randn(2, 3, 64, 64), seg(2, 64, 64)
    for _ in range(20):
        D(x, s)
        for layer in D.spectral_layers():
            mat = layer.normalized_weight().reshape(layer.out_channels, -1)
            assert torch.linalg.svdvals(mat.detach())[0].item() <= 1 + 1e-2


def test_spectral_estimate_recovers_after_weight_drift():
    D = small_disc().train()
    x, s = torch.randn(2, 3, 64, 64), seg(2, 64, 64)
    opt = Adam(D.parameters(), lr=1e-3, beta2=0.9)
    for _ in range(5):
        opt.step(torch.autograd.grad(D(x, s).patch_logits.mean(), opt.params))
    for _ in range(40):
        D(x, s)
    for layer in D.spectral_layers():
        mat = layer.normalized_weight().reshape(layer.out_channels, -1)
        assert torch.linalg.svdvals(mat.detach())[0].item() <= 1 + 1e-2


def test_conditioning_matters():
    D = small_disc().eval()
    x, s = torch.randn(1, 3, 64, 64), seg(1, 64, 64)
    perm = D(x, s[:, [2, 0, 1]]).patch_logits
    assert not torch.equal(D(x, s).patch_logits, perm)


def test_seg_to_disc_input_one_hot():
    mask = torch.tensor([[[2, 0]]])
    out = seg_to_disc_input(mask, 3)
    assert out[0, :, 0, 0].tolist() == [0.0, 0.0, 1.0]
    assert out[0, :, 0, 1].tolist() == [1.0, 0.0, 0.0]


def test_seg_to_disc_input_logits():
    out = seg_to_disc_input(torch.zeros(1, 3, 2, 2), 3)
    assert torch.allclose(out, torch.full((1, 3, 2, 2), 1 / 3))
    logits = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    out = seg_to_disc_input(logits, 3)
    e = logits.exp()
    assert torch.allclose(out, e / e.sum(1, keepdim=True), atol=1e-12)


def test_seg_to_disc_input_bad_label():
    with pytest.raises(ValueError, match="outside"):
        seg_to_disc_input(torch.tensor([[[0, 3]]]), 3)


def test_strided_block_gradients():
    torch.manual_seed(6)
    D = small_disc().double().eval()
    conv = D.strided[1]
    x = torch.randn(1, 16, 6, 6, dtype=torch.float64)
    attn = torch.rand(1, 1, 3, 3, dtype=torch.float64)
    r = torch.randn(1, 32, 3, 3, dtype=torch.float64)
    from amlnet.discriminator import _pad_for_ceil

    def f():
        y = torch.nn.functional.leaky_relu(conv(_pad_for_ceil(x)), 0.2)
        return (apply_attention(y, attn) * r).sum()

    rep = check_gradients(f, [conv.weight, conv.bias, x, attn])
    assert rep.max_relative_error < 1e-3
