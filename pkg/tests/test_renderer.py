import numpy as np
import pytest
import torch

from deferred_diffusion.renderer import (
    NUM_TOKENS,
    AttentionBlock,
    DeferredRenderer,
    ExpressionEncoder,
    RendererConfig,
    UNet,
    architecture_summary,
    attention_weights,
    control_branch,
    denoise,
    encode_expression,
    expression_attention,
)

TINY = dict(base_channels=8, channel_mult=(1, 2), attention_levels=(1,), token_width=8, control_channels=5, groups=4)


def tiny(mode="prior", **kw):
    return RendererConfig(**{**TINY, "mode": mode, **kw})


def probe_inputs(cfg, n=2, size=16, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 3, size, size, generator=g, dtype=dtype)
    tau = torch.randint(1, 1000, (n,), generator=g)
    c = torch.randn(n, cfg.control_channels, size, size, generator=g, dtype=dtype)
    z = torch.randn(n, cfg.expression_dim, generator=g, dtype=dtype)
    return x, tau, c, z


def test_config_validation():
    with pytest.raises(ValueError):
        RendererConfig(attention_levels=())
    with pytest.raises(ValueError):
        RendererConfig(attention_levels=(5,))
    with pytest.raises(ValueError):
        RendererConfig(mode="other")
    with pytest.raises(ValueError):
        RendererConfig(prediction="eps")


def test_encode_expression_trivial_and_jacobian():
    enc = ExpressionEncoder(8, 6)
    with torch.no_grad():
        enc.linear.weight.zero_()
        enc.linear.bias.zero_()
    assert not enc(torch.randn(3, 8)).any()
    with torch.no_grad():
        enc.linear.bias.copy_(torch.arange(NUM_TOKENS * 6, dtype=torch.float32))
    tok = enc(torch.zeros(8))
    assert tok.shape == (NUM_TOKENS, 6)
    assert torch.equal(tok.reshape(-1), enc.linear.bias)
    enc = ExpressionEncoder(8, 6).double()
    z = torch.randn(8, dtype=torch.float64)
    h = 1e-6
    for k in range(8):
        dz = torch.zeros(8, dtype=torch.float64)
        dz[k] = h
        fd = (enc(z + dz) - enc(z - dz)).reshape(-1) / (2 * h)
        torch.testing.assert_close(fd, enc.linear.weight[:, k], atol=1e-8, rtol=0)
    with pytest.raises(ValueError):
        enc(torch.zeros(7))
    r = DeferredRenderer(tiny())
    assert encode_expression(torch.zeros(2, 8), r).shape == (2, NUM_TOKENS, 8)


def test_expression_attention_cases():
    g = torch.Generator().manual_seed(0)
    Z = torch.randn(2, 10, 6, generator=g)
    tokens = torch.randn(2, 4, 5, generator=g)
    wq, wk = torch.randn(6, 6, generator=g), torch.randn(6, 5, generator=g)
    assert torch.equal(expression_attention(Z, tokens, wq, wk, torch.zeros(6, 5)), Z)
    # single token: softmax weight is 1 so every position receives W_v f
    wv = torch.randn(6, 5, generator=g)
    one = tokens[:, :1]
    out = expression_attention(Z, one, wq, wk, wv)
    torch.testing.assert_close(out, Z + (one @ wv.T).expand(-1, 10, -1))
    w = attention_weights(Z @ wq.T, tokens @ wk.T)
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 1, 10))
    # joint permutation of key/value tokens leaves the output unchanged
    perm = torch.tensor([2, 0, 3, 1])
    a = expression_attention(Z, tokens, wq, wk, wv)
    b = expression_attention(Z, tokens[:, perm], wq, wk, wv)
    torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


def test_joint_permutation_in_block():
    torch.manual_seed(0)
    blk = AttentionBlock(8, 2, 4, 5).double()
    torch.nn.init.normal_(blk.exp_v.weight)
    torch.nn.init.normal_(blk.to_out.weight)
    x = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    tok = torch.randn(2, 4, 5, dtype=torch.float64)
    torch.testing.assert_close(blk(x, tok), blk(x, tok[:, [3, 1, 0, 2]]), atol=1e-12, rtol=0)
    assert not torch.allclose(blk(x, tok), blk(x, None))


def test_zero_init_control_and_expression_is_noop():
    cfg = tiny()
    torch.manual_seed(0)
    base = UNet(cfg)
    for m in base.modules():  # give the base non-trivial output layers, as after pretraining
        if isinstance(m, AttentionBlock):
            torch.nn.init.normal_(m.to_out.weight, std=0.1)
    torch.nn.init.normal_(base.conv_out.weight, std=0.1)
    r = DeferredRenderer(cfg, base)
    for seed in range(10):
        x, tau, c, z = probe_inputs(cfg, seed=seed)
        with torch.no_grad():
            ref = base(x, tau)
            res = control_branch(x, tau, c, r)
            assert len(res) == base.num_skips
            assert all(not t.any() for t in res)
            full = r(x, tau, c, z)
            via = denoise(x, tau, encode_expression(z, r), res, r)
        assert torch.equal(full, ref)
        assert torch.equal(via, ref)
        assert full.shape == x.shape


def test_residual_shapes_match_skips():
    cfg = tiny(channel_mult=(1, 2, 2), attention_levels=(1, 2))
    r = DeferredRenderer(cfg)
    x, tau, c, _ = probe_inputs(cfg, size=16)
    res = control_branch(x, tau, c, r)
    assert [t.shape[1] for t in res] == r.base.encoder.skip_channels
    with pytest.raises(ValueError):
        control_branch(x, tau, c[:, :3], r)
    with pytest.raises(ValueError):
        r.base(x, tau, residuals=res[:-1])


def test_residuals_nonzero_after_one_step():
    cfg = tiny()
    torch.manual_seed(1)
    r = DeferredRenderer(cfg)
    # stand-in for a pretrained base: its zero-initialized output layers are nonzero
    torch.nn.init.normal_(r.base.conv_out.weight, std=0.1)
    for blk in r.base.attention_blocks():
        torch.nn.init.normal_(blk.to_out.weight, std=0.1)
    for p in r.base.base_parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam([p for p in r.parameters() if p.requires_grad], lr=1e-3)
    x, tau, c, z = probe_inputs(cfg)
    loss = (r(x, tau, c, z) - torch.ones_like(x)).pow(2).mean()
    loss.backward()
    opt.step()
    with torch.no_grad():
        res = control_branch(x, tau, c, r)
    assert any(t.abs().max() > 0 for t in res)
    assert any(p.abs().max() > 0 for p in r.base.expression_parameters()[1::2])


def test_scratch_mode_direct_conditioning():
    cfg = tiny("scratch")
    r = DeferredRenderer(cfg)
    assert r.control is None
    x, tau, c, z = probe_inputs(cfg)
    assert r(x, tau, c, z).shape == x.shape
    with pytest.raises(ValueError):
        r.base(x, tau)
    with pytest.raises(ValueError):
        control_branch(x, tau, c, r)
    with pytest.raises(ValueError):
        DeferredRenderer(tiny()).base(x, tau, control=c)


def test_expression_layer_count():
    for cfg in (tiny(), RendererConfig()):
        r = DeferredRenderer(cfg)
        blocks = r.base.attention_blocks()
        assert len(blocks) >= 1 and all(b.has_expression for b in blocks)
        assert len(r.base.expression_parameters()) == 2 * len(blocks)
    no_exp = DeferredRenderer(tiny(use_expression=False))
    assert no_exp.expression is None and not no_exp.base.expression_parameters()


def test_deterministic_forward():
    cfg = tiny()
    torch.manual_seed(3)
    r = DeferredRenderer(cfg)
    x, tau, c, z = probe_inputs(cfg)
    with torch.no_grad():
        assert torch.equal(r(x, tau, c, z), r(x, tau, c, z))


def test_finite_difference_gradients():
    cfg = tiny()
    torch.manual_seed(4)
    r = DeferredRenderer(cfg).double()
    # perturb zero-initialized layers so every parameter influences the loss
    with torch.no_grad():
        for p in r.parameters():
            if not p.any():
                p.normal_(0, 0.2)
    x, tau, c, z = probe_inputs(cfg, n=2, size=8, dtype=torch.float64)
    target = torch.randn_like(x)

    def loss_fn():
        return ((r(x, tau, c, z) - target) ** 2).mean()

    r.zero_grad()
    loss_fn().backward()
    named = [(n, p) for n, p in r.named_parameters()]
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = 0
    for k in rng.permutation(len(named))[:30]:
        name, p = named[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        g = float(p.grad[idx])
        with torch.no_grad():
            old = float(p[idx])
            p[idx] = old + h
            lp = float(loss_fn())
            p[idx] = old - h
            lm = float(loss_fn())
            p[idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-7), (name, fd, g)
        checked += 1
    assert checked >= 20


def test_architecture_summary():
    cfg = tiny()
    text = architecture_summary(DeferredRenderer(cfg), (1, 3, 16, 16))
    assert "expression_attention_layers" in text
    n_blocks = len(DeferredRenderer(cfg).base.attention_blocks())
    assert f"attention_blocks {n_blocks}" in text
    assert f"expression_attention_layers {n_blocks}" in text
    assert "conv_out" in text and "control.zero_convs.0" in text
