import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from blurdecouple.extractors import SHARP_PROMPT, PromptTable
from blurdecouple.networks import (
    Adapter, DualCrossAttention, UNet, UNetSpec, attention, dual_cross_attention, timestep_embedding,
)
from conftest import randomize_


def _attn_oracle(q, k, v, heads):
    b, n, d = q.shape
    hd = d // heads
    split = lambda x: x.reshape(b, x.shape[1], heads, hd).transpose(1, 2)  # noqa: E731
    out = F.scaled_dot_product_attention(split(q), split(k), split(v))
    return out.transpose(1, 2).reshape(b, n, d)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_torch_reference(heads):
    g = torch.Generator().manual_seed(heads)
    q, k, v = (torch.randn(2, n, 8, generator=g, dtype=torch.float64) for n in (5, 7, 7))
    assert torch.allclose(attention(q, k, v, heads), _attn_oracle(q, k, v, heads), atol=1e-12)


def test_attention_key_mask_equals_truncation():
    g = torch.Generator().manual_seed(0)
    q, k, v = (torch.randn(1, 4, 8, generator=g, dtype=torch.float64) for _ in range(3))
    mask = torch.tensor([[True, True, False, False]])
    assert torch.allclose(attention(q, k, v, 2, mask), attention(q, k[:, :2], v[:, :2], 2), atol=1e-12)


def _weights(d, seed):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(d, d, generator=g, dtype=torch.float64) / math.sqrt(d) for _ in range(5)]


def test_dual_attention_zero_value_equals_text_only():
    Wq, Wk, Wv, Wkb, _ = _weights(8, 0)
    Z, c, cb = torch.randn(2, 6, 8, dtype=torch.float64), torch.randn(2, 3, 8, dtype=torch.float64), \
        torch.randn(2, 16, 8, dtype=torch.float64)
    text_only = dual_cross_attention(Z, c, None, Wq, Wk, Wv)
    assert torch.equal(dual_cross_attention(Z, c, cb, Wq, Wk, Wv, Wkb, torch.zeros(8, 8, dtype=torch.float64)),
                       text_only)
    assert torch.equal(text_only, attention(Z @ Wq, c @ Wk, c @ Wv))


def test_dual_attention_single_blur_token_hand_case():
    one = torch.ones(1, 1, dtype=torch.float64)
    Z = torch.tensor([[[0.7], [-2.0]]], dtype=torch.float64)
    c = torch.tensor([[[1.0], [2.0]]], dtype=torch.float64)
    cb = torch.tensor([[[3.0]]], dtype=torch.float64)
    W = torch.tensor([[0.5]], dtype=torch.float64)
    full = dual_cross_attention(Z, c, cb, W, W, W, one, one)
    second = full - dual_cross_attention(Z, c, None, W, W, W)
    assert torch.allclose(second, torch.full_like(second, 3.0), atol=1e-14)


def test_dual_attention_rejects_width_mismatch():
    W = _weights(4, 1)
    with pytest.raises(ValueError):
        dual_cross_attention(torch.zeros(1, 2, 4), torch.zeros(1, 2, 5), None, *W[:3])


def test_module_matches_functional_form():
    m = DualCrossAttention(8, heads=2).double()
    randomize_(m)
    x, text, blur = (torch.randn(2, n, 8, dtype=torch.float64) for n in (9, 4, 16))
    ref = dual_cross_attention(x, text, blur, m.to_q.weight.T, m.to_k.weight.T, m.to_v.weight.T,
                               m.to_k_blur.weight.T, m.to_v_blur.weight.T, heads=2)
    assert torch.allclose(m(x, text, None, blur), m.to_out(ref), atol=1e-12)


def test_timestep_embedding_values():
    e = timestep_embedding(torch.tensor([0, 3]), 8, torch.float64)
    half = torch.exp(-math.log(10000.0) * torch.arange(4, dtype=torch.float64) / 4)
    assert torch.allclose(e[1], torch.cat([torch.cos(3 * half), torch.sin(3 * half)]), atol=1e-15)
    assert torch.equal(e[0], torch.tensor([1.0] * 4 + [0.0] * 4, dtype=torch.float64))


SMALL = UNetSpec(levels=((16, True), (16, True)), d_model=16, time_embed_dim=16, heads=2)


def _inputs(spec, b=2, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(b, spec.latent_channels, size, size, generator=g)
    t = torch.randint(0, 256, (b,), generator=g)
    prompts = PromptTable(spec.d_model)
    text, mask = prompts.batch([SHARP_PROMPT] * b)
    f = torch.randn(b, 16, spec.d_model, generator=g)
    return z, t, text.detach(), mask, f


def test_zero_residuals_identical_to_absent():
    torch.manual_seed(0)
    unet = UNet(SMALL)
    z, t, text, mask, _ = _inputs(SMALL)
    res = [torch.zeros(2, 16, 8, 8), torch.zeros(2, 16, 4, 4), torch.zeros(2, 16, 4, 4)]
    assert torch.equal(unet(z, t, text, mask, residuals=res), unet(z, t, text, mask))


def test_fresh_blur_branch_is_inert():
    torch.manual_seed(1)
    unet = UNet(SMALL)
    z, t, text, mask, f_b = _inputs(SMALL)
    assert torch.equal(unet(z, t, text, mask, blur=f_b), unet(z, t, text, mask))
    with torch.no_grad():
        for name, p in unet.named_parameters():
            if "to_v_blur" in name:
                p.normal_()
    assert not torch.equal(unet(z, t, text, mask, blur=f_b), unet(z, t, text, mask))


def test_residual_count_and_shape_checked():
    torch.manual_seed(0)
    unet = UNet(SMALL)
    z, t, text, mask, _ = _inputs(SMALL)
    with pytest.raises(ValueError):
        unet(z, t, text, mask, residuals=[torch.zeros(2, 16, 8, 8)])
    with pytest.raises(ValueError):
        unet(z, t, text, mask, residuals=[torch.zeros(2, 16, 8, 8)] * 3)


def test_residual_enters_at_documented_points():
    torch.manual_seed(2)
    unet = UNet(SMALL)
    z, t, text, mask, _ = _inputs(SMALL)
    base = unet(z, t, text, mask)
    for i, shape in enumerate([(2, 16, 8, 8), (2, 16, 4, 4), (2, 16, 4, 4)]):
        res = [torch.zeros(2, 16, 8, 8), torch.zeros(2, 16, 4, 4), torch.zeros(2, 16, 4, 4)]
        res[i] = torch.ones(shape)
        assert not torch.equal(unet(z, t, text, mask, residuals=res), base)


@pytest.mark.parametrize("case", range(50))
def test_unet_shape_finiteness_fuzz(case):
    rng = np.random.default_rng(case)
    d = int(rng.choice([8, 16]))
    heads = int(rng.choice([1, 2]))
    n_levels = int(rng.integers(2, 4))
    levels = tuple((int(rng.choice([8, 16])), bool(rng.random() < 0.5) or i == n_levels - 1)
                   for i in range(n_levels))
    spec = UNetSpec(levels=levels, d_model=d, time_embed_dim=8, heads=heads)
    torch.manual_seed(case)
    unet = randomize_(UNet(spec), case)
    size = 2 ** (n_levels - 1) * int(rng.integers(1, 3))
    b = int(rng.integers(1, 3))
    z, t, text, mask, f = _inputs(spec, b, size, case)
    out = unet(z, t, text, mask, blur=f if rng.random() < 0.5 else None)
    assert out.shape == z.shape and torch.isfinite(out).all()


def test_fresh_adapter_residuals_are_zero_and_pure():
    torch.manual_seed(3)
    adapter = Adapter(SMALL, latent_size=8)
    z, t, _, _, f_s = _inputs(SMALL)
    res = adapter(z, t, f_s)
    assert [tuple(r.shape) for r in res] == [(2, 16, 8, 8), (2, 16, 4, 4), (2, 16, 4, 4)]
    assert all(torch.equal(r, torch.zeros_like(r)) for r in res)
    randomize_(adapter)
    a, b = adapter(z, t, f_s), adapter(z, t, f_s)
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert any(r.abs().sum() > 0 for r in a)


def test_adapter_output_depends_on_structure_tokens():
    torch.manual_seed(4)
    adapter = randomize_(Adapter(SMALL, latent_size=8))
    z, t, _, _, f_s = _inputs(SMALL)
    zero = adapter(z, t, torch.zeros_like(f_s))
    assert any(not torch.equal(x, y) for x, y in zip(adapter(z, t, f_s), zero))
    # structure-free baseline is deterministic given params
    assert all(torch.equal(x, y) for x, y in zip(zero, adapter(z, t, torch.zeros_like(f_s))))


def test_adapter_rejects_wrong_token_width():
    adapter = Adapter(SMALL, latent_size=8)
    z, t, _, _, _ = _inputs(SMALL)
    with pytest.raises(ValueError):
        adapter(z, t, torch.zeros(2, 16, 7))


def test_adapter_layout_changes_residuals_and_checks_shape():
    torch.manual_seed(5)
    adapter = randomize_(Adapter(SMALL, latent_size=8))
    z, t, _, _, f_s = _inputs(SMALL)
    layout = torch.randn(2, 64, SMALL.d_model)
    base = adapter(z, t, f_s)
    assert any(not torch.equal(x, y) for x, y in zip(base, adapter(z, t, f_s, layout)))
    with pytest.raises(ValueError):
        adapter(z, t, f_s, torch.zeros(2, 63, SMALL.d_model))


def test_fresh_adapter_with_layout_is_still_zero():
    adapter = Adapter(SMALL, latent_size=8)
    z, t, _, _, f_s = _inputs(SMALL)
    res = adapter(z, t, f_s, torch.randn(2, 64, SMALL.d_model))
    assert all(not r.any() for r in res)
