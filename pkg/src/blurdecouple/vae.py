"""Latent autoencoder and the refined-VAE (encoder/decoder refiners with skip connections)."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import PhaseOrderError
from .networks import group_norm, zero_module

KL_WEIGHT = 1e-6


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1), group_norm(cout), nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1), group_norm(cout), nn.SiLU(),
    )


class VAE(nn.Module):
    """Three stride-2 encoder stages, a Gaussian latent head and a mirrored decoder.

    Latents are multiplied by ``latent_scale`` (calibrated after pretraining so
    the diffusion model sees roughly unit-variance codes).
    """

    def __init__(self, channels=(32, 64, 128), latent_channels: int = 4):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.enc_in = nn.Conv2d(3, c0, 3, padding=1)
        self.enc = nn.ModuleList([_block(c0, c0, 2), _block(c0, c1, 2), _block(c1, c2, 2)])
        self.head = nn.Conv2d(c2, 2 * latent_channels, 3, padding=1)
        self.dec_in = nn.Conv2d(latent_channels, c2, 3, padding=1)
        self.dec = nn.ModuleList([_block(c2, c2), _block(c2, c1), _block(c1, c0)])
        self.tail = nn.Sequential(nn.Conv2d(c0, c0, 3, padding=1), nn.SiLU(), nn.Conv2d(c0, 3, 3, padding=1))
        self.register_buffer("latent_scale", torch.tensor(1.0))

    @staticmethod
    def check_size(x: torch.Tensor) -> None:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError(f"image dims must be divisible by 8, got {tuple(x.shape[-2:])}")

    def encoder_features(self, x, refiner: "Refiner | None" = None):
        self.check_size(x)
        h = self.enc_in(x)
        skips = []
        for i, stage in enumerate(self.enc):
            h = stage(h)
            if refiner is not None:
                h = refiner.enc[i](h)
                skips.append(h)
        return h, skips

    def moments(self, x, refiner=None):
        h, skips = self.encoder_features(x, refiner)
        mean, logvar = self.head(h).chunk(2, dim=1)
        return mean, logvar, skips

    def encode(self, x, mode: str = "mean", seed: int | None = None) -> torch.Tensor:
        mean, logvar, _ = self.moments(x)
        if mode == "mean":
            return mean * self.latent_scale
        if mode != "sample":
            raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        xi = torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
        return (mean + torch.exp(0.5 * logvar) * xi) * self.latent_scale

    def decode(self, z, refiner: "Refiner | None" = None, skips=None, clamp: bool = True) -> torch.Tensor:
        if refiner is not None and len(skips) != len(self.dec):
            raise ValueError(f"expected {len(self.dec)} skip features, got {len(skips)}")
        h = self.dec_in(z / self.latent_scale)
        for i, stage in enumerate(self.dec):
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = stage(h)
            if refiner is not None:
                h = refiner.dec[i](h, skips[len(skips) - 1 - i])
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        out = self.tail(h)
        return out.clamp(-1, 1) if clamp else out


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Elementwise KL(N(mean, exp(logvar)) || N(0, 1))."""
    return 0.5 * (mean**2 + logvar.exp() - 1.0 - logvar)


def vae_pretrain_loss(x: torch.Tensor, vae: VAE, seed: int = 0, kl_weight: float = KL_WEIGHT) -> torch.Tensor:
    """Reconstruction MSE of a sampled latent plus a lightly weighted KL term."""
    mean, logvar, _ = vae.moments(x)
    logvar = logvar.clamp(-30.0, 20.0)
    gen = torch.Generator().manual_seed(seed)
    z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=gen, dtype=mean.dtype)
    recon = vae.decode(z * vae.latent_scale, clamp=False)
    kl = kl_divergence(mean, logvar).flatten(1).sum(1).mean()
    return F.mse_loss(recon, x) + kl_weight * kl


class EncoderRefinerBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = zero_module(nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, h):
        return h + self.conv2(F.silu(self.conv1(h)))


class DecoderRefinerBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.skip_proj = nn.Conv2d(ch, ch, 1)
        self.conv1 = nn.Conv2d(2 * ch, ch, 3, padding=1)
        self.conv2 = zero_module(nn.Conv2d(ch, ch, 3, padding=1))

    def forward(self, h, skip):
        return h + self.conv2(F.silu(self.conv1(torch.cat([h, self.skip_proj(skip)], dim=1))))


class Refiner(nn.Module):
    """One residual refiner per encoder stage and per decoder stage, zero-initialized.

    Decoder stage i pairs with encoder stage (n-1-i), which has the same
    resolution and width.
    """

    def __init__(self, channels=(32, 64, 128)):
        super().__init__()
        self.enc = nn.ModuleList(EncoderRefinerBlock(c) for c in channels)
        self.dec = nn.ModuleList(DecoderRefinerBlock(c) for c in reversed(channels))
        self.register_buffer("encoder_trained", torch.tensor(False))
        self.register_buffer("decoder_trained", torch.tensor(False))


def encode_refined(y: torch.Tensor, vae: VAE, refiner: Refiner):
    """Mean latent of ``y`` with every encoder stage pre-filtered; also returns the skip features."""
    mean, _, skips = vae.moments(y, refiner)
    return mean * vae.latent_scale, skips


def decode_refined(z: torch.Tensor, skips, vae: VAE, refiner: Refiner, clamp: bool = True) -> torch.Tensor:
    return vae.decode(z, refiner, skips, clamp=clamp)


def refiner_enc_loss(x: torch.Tensor, y: torch.Tensor, vae: VAE, refiner: Refiner) -> torch.Tensor:
    """MSE between the plain latent of the sharp image and the refined latent of its blurry pair."""
    with torch.no_grad():
        target = vae.encode(x, "mean")
    z, _ = encode_refined(y, vae, refiner)
    return F.mse_loss(z, target)


def require_encoder_refiner(refiner: Refiner) -> None:
    if not bool(refiner.encoder_trained):
        raise PhaseOrderError("decoder refiner training requires a completed encoder-refiner phase")
