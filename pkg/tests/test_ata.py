import numpy as np
import pytest
import torch

from amlnet.ata import CONNECTIONS, AtaModule, make_connector
from amlnet.numerics import check_gradients


def conv1x1(conv, x):
    """Apply a 1x1 conv at one pixel: x is a list of C floats."""
    w = conv.weight[:, :, 0, 0].tolist()
    b = conv.bias.tolist()
    return [sum(wi * xi for wi, xi in zip(row, x)) + bi for row, bi in zip(w, b)]


def oracle(m: AtaModule, d, g):
    """Double-loop reference for one batch element. d, g: (C, H, W) tensors."""
    c, h, w = g.shape
    pix = [(y, x) for y in range(h) for x in range(w)]
    dv = {p: d[:, p[0], p[1]].tolist() for p in pix}
    q = {p: conv1x1(m.query, dv[p]) for p in pix}
    k = {p: conv1x1(m.key, dv[p]) for p in pix}
    v = {p: conv1x1(m.value, dv[p]) for p in pix}
    weights = []
    for pi in pix:
        logits = [sum(a * b for a, b in zip(q[pi], k[pj])) for pj in pix]
        mx = max(logits)
        e = [np.exp(l - mx) for l in logits]
        weights.append([x / sum(e) for x in e])
    fused = torch.empty_like(g)
    alpha = m.alpha.item()
    for i, pi in enumerate(pix):
        agg = [sum(weights[i][j] * v[pj][ch] for j, pj in enumerate(pix)) for ch in range(c // 2)]
        o = conv1x1(m.out, agg)
        for ch in range(c):
            fused[ch, pi[0], pi[1]] = alpha * o[ch] + g[ch, pi[0], pi[1]].item()
    return torch.tensor(weights, dtype=g.dtype), fused


def test_constant_input_gives_uniform_rows():
    m = AtaModule(8)
    w = m.attention_weights(torch.full((2, 8, 3, 3), 0.7))
    assert torch.allclose(w, torch.full((2, 9, 9), 1 / 9), atol=1e-7)


def test_zero_query_gives_uniform_rows():
    m = AtaModule(8)
    with torch.no_grad():
        m.query.weight.zero_()
        m.query.bias.zero_()
    w = m.attention_weights(torch.randn(1, 8, 2, 3))
    assert torch.allclose(w, torch.full((1, 6, 6), 1 / 6), atol=1e-7)


def test_attention_matches_double_loop():
    torch.manual_seed(3)
    m = AtaModule(8).double()
    d = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    w = m.attention_weights(d)
    ref, _ = oracle(m, d[0], torch.zeros(8, 2, 2, dtype=torch.float64))
    assert torch.allclose(w[0], ref, atol=1e-5)


def test_fresh_module_is_identity():
    m = AtaModule(16)
    assert m.alpha.item() == 0.0
    g = torch.randn(2, 16, 4, 4)
    out = m(torch.randn(2, 16, 4, 4), g)
    assert (out.fused - g).abs().max().item() == 0.0


def test_alpha_one_with_identity_projections():
    m = AtaModule(8).double()
    with torch.no_grad():
        m.alpha.fill_(1.0)
        m.value.weight.zero_()
        m.value.bias.zero_()
        m.out.weight.zero_()
        m.out.bias.zero_()
        for ch in range(4):
            m.value.weight[ch, ch] = 1.0
            m.out.weight[ch, ch] = 1.0
    d = torch.randn(1, 8, 2, 3, dtype=torch.float64)
    g = torch.randn(1, 8, 2, 3, dtype=torch.float64)
    out = m(d, g, return_attention=True)
    w_ref, fused_ref = oracle(m, d[0], g[0])
    assert torch.allclose(out.attention[0], w_ref, atol=1e-10)
    assert torch.allclose(out.fused[0], fused_ref, atol=1e-10)
    # identity value path: upper channels untouched, lower channels gain attended d
    assert torch.equal(out.fused[0, 4:], g[0, 4:])
    attended = (d[0, :4].reshape(4, -1) @ out.attention[0].T).reshape(4, 2, 3)
    assert torch.allclose(out.fused[0, :4], g[0, :4] + attended, atol=1e-12)


def test_gradients_match_finite_differences():
    torch.manual_seed(1)
    m = AtaModule(8).double()
    with torch.no_grad():
        m.alpha.fill_(0.7)
    d = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    g = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    r = torch.randn(1, 8, 2, 2, dtype=torch.float64)
    params = [m.alpha] + [p for mod in (m.query, m.key, m.value, m.out) for p in mod.parameters()]
    rep = check_gradients(lambda: (m(d, g).fused * r).sum(), params + [d, g])
    assert rep.max_relative_error < 1e-3


def test_batch_permutation_equivariance():
    m = AtaModule(8)
    with torch.no_grad():
        m.alpha.fill_(0.5)
    d, g = torch.randn(3, 8, 3, 3), torch.randn(3, 8, 3, 3)
    perm = torch.tensor([2, 0, 1])
    a = m(d, g, return_attention=True)
    b = m(d[perm], g[perm], return_attention=True)
    assert torch.allclose(a.fused[perm], b.fused, atol=1e-6)
    assert torch.allclose(a.attention[perm], b.attention, atol=1e-6)


def test_rows_stochastic_for_random_inputs():
    m = AtaModule(16)
    for _ in range(10):
        w = m.attention_weights(torch.randn(2, 16, 4, 5) * 5)
        assert torch.allclose(w.sum(-1), torch.ones(2, 20), atol=1e-5)


def test_channel_count_must_divide_by_eight():
    with pytest.raises(ValueError, match="divisible by 8"):
        AtaModule(12)


def test_channel_mismatch_names_counts():
    m = AtaModule(8)
    with pytest.raises(ValueError, match="16 channels, expected 8"):
        m(torch.randn(1, 16, 2, 2), torch.randn(1, 8, 2, 2))
    with pytest.raises(ValueError, match="expected 8"):
        m.attention_weights(torch.randn(1, 4, 2, 2))


def test_position_cap():
    m = AtaModule(8)
    with pytest.raises(ValueError, match="4096"):
        m(torch.randn(1, 8, 65, 64), torch.randn(1, 8, 65, 64))


def test_off_by_one_discriminator_map_is_resized():
    m = AtaModule(8)
    with torch.no_grad():
        m.alpha.fill_(1.0)
    out = m(torch.randn(1, 8, 5, 5), torch.randn(1, 8, 4, 4))
    assert out.fused.shape == (1, 8, 4, 4)


def test_adapter_for_different_discriminator_width():
    m = AtaModule(8, d_channels=24)
    assert m.adapt is not None
    out = m(torch.randn(1, 24, 3, 3), torch.randn(1, 8, 3, 3))
    assert out.fused.shape == (1, 8, 3, 3)


@pytest.mark.parametrize("kind", CONNECTIONS)
def test_connectors_preserve_shape(kind):
    c = make_connector(kind, 16, 32)
    g = torch.randn(2, 16, 4, 4)
    assert c(torch.randn(2, 32, 4, 4), g).fused.shape == g.shape


def test_none_and_add_connectors():
    g, d = torch.randn(1, 8, 2, 2), torch.randn(1, 8, 2, 2)
    assert torch.equal(make_connector("none", 8)(d, g).fused, g)
    assert torch.equal(make_connector("add", 8)(d, g).fused, g + d)


def test_sta_takes_query_from_generator():
    m = make_connector("sta", 8)
    d = torch.full((1, 8, 3, 3), 0.3)
    g = torch.randn(1, 8, 3, 3)
    # keys are identical across positions, so rows are uniform whatever the query
    w = m.attention_weights(d, g)
    assert torch.allclose(w, torch.full((1, 9, 9), 1 / 9), atol=1e-7)
    d2 = torch.randn(1, 8, 3, 3)
    assert not torch.allclose(m.attention_weights(d2, g), m.attention_weights(d2))


def test_unknown_connection():
    with pytest.raises(ValueError, match="unknown connection"):
        make_connector("bogus", 8)
