"""Denoising U-Net with dual (text + blur) cross-attention and the structure adapter."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class UNetSpec:
    levels: tuple[tuple[int, bool], ...] = ((64, True), (128, True))
    latent_channels: int = 4
    d_model: int = 128
    time_embed_dim: int = 128
    heads: int = 4

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("U-Net needs at least two levels")
        if not self.levels[-1][1]:
            raise ValueError("attention is required at the lowest resolution")


def group_norm(ch: int) -> nn.GroupNorm:
    """8 groups for wide layers; narrow (miniature) layers keep at least 4 channels per group."""
    if ch >= 32 and ch % 8 == 0:
        return nn.GroupNorm(8, ch)
    return nn.GroupNorm(2 if ch % 2 == 0 and ch >= 8 else 1, ch)


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(dtype)


# ---------------------------------------------------------------- attention


def attention(q, k, v, heads: int = 1, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Scaled dot-product attention over (B, N, d) tensors; ``key_mask`` is (B, M) bool."""
    b, n, d = q.shape
    m = k.shape[1]
    hd = d // heads
    q = q.reshape(b, n, heads, hd).transpose(1, 2)
    k = k.reshape(b, m, heads, hd).transpose(1, 2)
    v = v.reshape(b, m, heads, hd).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    out = scores.softmax(dim=-1) @ v
    return out.transpose(1, 2).reshape(b, n, d)


def dual_cross_attention(Z, c, c_b, W_q, W_k, W_v, W_k_blur=None, W_v_blur=None, heads: int = 1, text_mask=None):
    """Attn(Z W_q, c W_k, c W_v) + Attn(Z W_q, c_b W'_k, c_b W'_v).

    Matrices act on the right (d x d).  When ``c_b`` is None the blur term is
    omitted entirely.
    """
    d = W_q.shape[0]
    for name, x in (("Z", Z), ("c", c), ("c_b", c_b)):
        if x is not None and x.shape[-1] != d:
            raise ValueError(f"{name} width {x.shape[-1]} != d_model {d}")
    q = Z @ W_q
    out = attention(q, c @ W_k, c @ W_v, heads, text_mask)
    if c_b is not None:
        out = out + attention(q, c_b @ W_k_blur, c_b @ W_v_blur, heads)
    return out


class Attention(nn.Module):
    def __init__(self, d: int, heads: int = 1, out_bias: bool = True):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(d, d, bias=False)
        self.to_v = nn.Linear(d, d, bias=False)
        self.to_out = nn.Linear(d, d, bias=out_bias)

    def forward(self, x, ctx=None, key_mask=None):
        ctx = x if ctx is None else ctx
        return self.to_out(attention(self.to_q(x), self.to_k(ctx), self.to_v(ctx), self.heads, key_mask))


class DualCrossAttention(nn.Module):
    """Frozen text cross-attention plus a trainable blur-token branch (W'_v starts at zero)."""

    def __init__(self, d: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(d, d, bias=False)
        self.to_v = nn.Linear(d, d, bias=False)
        self.to_k_blur = nn.Linear(d, d, bias=False)
        self.to_v_blur = zero_module(nn.Linear(d, d, bias=False))
        self.to_out = nn.Linear(d, d)

    def forward(self, x, text, text_mask=None, blur=None):
        q = self.to_q(x)
        out = attention(q, self.to_k(text), self.to_v(text), self.heads, text_mask)
        if blur is not None:
            out = out + attention(q, self.to_k_blur(blur), self.to_v_blur(blur), self.heads)
        return self.to_out(out)


class FeedForward(nn.Sequential):
    def __init__(self, d: int, mult: int = 2):
        super().__init__(nn.Linear(d, d * mult), nn.GELU(), nn.Linear(d * mult, d))


# ---------------------------------------------------------------- blocks


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = group_norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialTransformer(nn.Module):
    """Self-attention, dual cross-attention and feed-forward over the spatial tokens."""

    def __init__(self, ch: int, d: int, heads: int):
        super().__init__()
        self.norm = group_norm(ch)
        self.proj_in = nn.Conv2d(ch, d, 1)
        self.ln1, self.ln2, self.ln3 = nn.LayerNorm(d), nn.LayerNorm(d), nn.LayerNorm(d)
        self.self_attn = Attention(d, heads)
        self.cross_attn = DualCrossAttention(d, heads)
        self.ff = FeedForward(d)
        self.proj_out = nn.Conv2d(d, ch, 1)

    def forward(self, x, text, text_mask=None, blur=None):
        b, _, h, w = x.shape
        z = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        z = z + self.self_attn(self.ln1(z))
        z = z + self.cross_attn(self.ln2(z), text, text_mask, blur)
        z = z + self.ff(self.ln3(z))
        return x + self.proj_out(z.transpose(1, 2).reshape(b, -1, h, w))


class CrossAttnBlock(nn.Module):
    """Spatial tokens (queries) attend to a token sequence (keys/values)."""

    def __init__(self, ch: int, d: int, heads: int):
        super().__init__()
        self.norm = group_norm(ch)
        self.proj_in = nn.Conv2d(ch, d, 1)
        self.ln_q, self.ln_kv = nn.LayerNorm(d), nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.proj_out = nn.Conv2d(d, ch, 1)

    def forward(self, x, tokens):
        b, _, h, w = x.shape
        z = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        z = self.attn(self.ln_q(z), self.ln_kv(tokens))
        return x + self.proj_out(z.transpose(1, 2).reshape(b, -1, h, w))


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.mlp(timestep_embedding(t, self.dim, dtype))


def _as_timesteps(t, z: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        return t
    return torch.full((z.shape[0],), int(t), dtype=torch.long)


# ---------------------------------------------------------------- U-Net


class DownBlock(nn.Module):
    def __init__(self, cin, cout, attn, spec: UNetSpec, down: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, spec.time_embed_dim)
        self.attn = SpatialTransformer(cout, spec.d_model, spec.heads) if attn else None
        self.down = Downsample(cout) if down else None


class UpBlock(nn.Module):
    def __init__(self, cin, cout, attn, spec: UNetSpec, up: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, spec.time_embed_dim)
        self.attn = SpatialTransformer(cout, spec.d_model, spec.heads) if attn else None
        self.up = Upsample(cout) if up else None


class MidBlock(nn.Module):
    def __init__(self, ch, spec: UNetSpec):
        super().__init__()
        self.res1 = ResBlock(ch, ch, spec.time_embed_dim)
        self.attn = SpatialTransformer(ch, spec.d_model, spec.heads)
        self.res2 = ResBlock(ch, ch, spec.time_embed_dim)


class UNet(nn.Module):
    """eps_theta(z_t, t, text, blur tokens, adapter residuals)."""

    def __init__(self, spec: UNetSpec = UNetSpec()):
        super().__init__()
        self.spec = spec
        chans = [c for c, _ in spec.levels]
        self.time = TimeEmbedding(spec.time_embed_dim)
        self.conv_in = nn.Conv2d(spec.latent_channels, chans[0], 3, padding=1)
        n = len(spec.levels)
        self.down = nn.ModuleList()
        prev = chans[0]
        for i, (ch, att) in enumerate(spec.levels):
            self.down.append(DownBlock(prev, ch, att, spec, down=i < n - 1))
            prev = ch
        self.mid = MidBlock(prev, spec)
        self.up = nn.ModuleList()
        for i in reversed(range(n)):
            ch, att = spec.levels[i]
            self.up.append(UpBlock(prev + ch, ch, att, spec, up=i > 0))
            prev = ch
        self.norm_out = group_norm(prev)
        self.conv_out = nn.Conv2d(prev, spec.latent_channels, 3, padding=1)

    def forward(self, z_t, t, text, text_mask=None, blur=None, residuals=None):
        n = len(self.spec.levels)
        if residuals is not None and len(residuals) != n + 1:
            raise ValueError(f"expected {n + 1} residuals, got {len(residuals)}")
        emb = self.time(_as_timesteps(t, z_t), z_t.dtype)
        h = self.conv_in(z_t)
        skips = []
        for i, blk in enumerate(self.down):
            h = blk.res(h, emb)
            if blk.attn is not None:
                h = blk.attn(h, text, text_mask, blur)
            if residuals is not None:
                if residuals[i].shape != h.shape:
                    raise ValueError(f"residual {i} shape {tuple(residuals[i].shape)} != {tuple(h.shape)}")
                h = h + residuals[i]
            skips.append(h)
            if blk.down is not None:
                h = blk.down(h)
        h = self.mid.res1(h, emb)
        h = self.mid.attn(h, text, text_mask, blur)
        h = self.mid.res2(h, emb)
        if residuals is not None:
            if residuals[-1].shape != h.shape:
                raise ValueError(f"middle residual shape {tuple(residuals[-1].shape)} != {tuple(h.shape)}")
            h = h + residuals[-1]
        for blk in self.up:
            h = blk.res(torch.cat([h, skips.pop()], dim=1), emb)
            if blk.attn is not None:
                h = blk.attn(h, text, text_mask, blur)
            if blk.up is not None:
                h = blk.up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------- adapter


class AdapterLevel(nn.Module):
    def __init__(self, cin, cout, spec: UNetSpec, down: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, spec.time_embed_dim)
        self.attn = CrossAttnBlock(cout, spec.d_model, spec.heads)
        self.zero = zero_module(nn.Conv2d(cout, cout, 1))
        self.down = Downsample(cout) if down else None


class Adapter(nn.Module):
    """ControlNet-style structure adapter.

    Reads the noisy latent spatially, optionally together with the structure
    extractor's patch-token layout (one token per latent cell), and the
    structure tokens through cross-attention in every down block; each
    residual leaves through a zero-initialized 1x1 convolution.
    """

    def __init__(self, spec: UNetSpec = UNetSpec(), latent_size: int = 8):
        super().__init__()
        self.spec = spec
        chans = [c for c, _ in spec.levels]
        self.time = TimeEmbedding(spec.time_embed_dim)
        self.conv_in = nn.Conv2d(spec.latent_channels, chans[0], 3, padding=1)
        self.pos = nn.Parameter(torch.randn(1, chans[0], latent_size, latent_size) * 0.02)
        self.layout_in = nn.Conv2d(spec.d_model, chans[0], 1)
        n = len(chans)
        self.levels = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.levels.append(AdapterLevel(prev, ch, spec, down=i < n - 1))
            prev = ch
        self.mid_res = ResBlock(prev, prev, spec.time_embed_dim)
        self.mid_attn = CrossAttnBlock(prev, spec.d_model, spec.heads)
        self.mid_zero = zero_module(nn.Conv2d(prev, prev, 1))

    def forward(self, z_t, t, f_s, layout=None) -> list[torch.Tensor]:
        if f_s.shape[-1] != self.spec.d_model:
            raise ValueError(f"structure tokens width {f_s.shape[-1]} != {self.spec.d_model}")
        emb = self.time(_as_timesteps(t, z_t), z_t.dtype)
        h = self.conv_in(z_t) + self.pos
        if layout is not None:
            b, n, d = layout.shape
            hh, ww = z_t.shape[-2:]
            if n != hh * ww or d != self.spec.d_model:
                raise ValueError(f"layout tokens {tuple(layout.shape)} do not tile a {hh}x{ww} latent")
            h = h + self.layout_in(layout.transpose(1, 2).reshape(b, d, hh, ww))
        out = []
        for lvl in self.levels:
            h = lvl.attn(lvl.res(h, emb), f_s)
            out.append(lvl.zero(h))
            if lvl.down is not None:
                h = lvl.down(h)
        h = self.mid_attn(self.mid_res(h, emb), f_s)
        out.append(self.mid_zero(h))
        return out
