"""Inference: structure-guided deblurring, blur transfer, evaluation and model loading."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from . import blur_lab
from .checkpoint import Checkpoint, load_checkpoint
from .diffusion import NoiseSchedule, add_noise, default_schedule, sample
from .extractors import BLURRY_PROMPT, NULL_PROMPT, SHARP_PROMPT
from .metrics import psnr, ssim
from .models import ModelConfig, Models
from .vae import decode_refined, encode_refined

log = logging.getLogger(__name__)

DEFAULT_STEPS = 30
DEFAULT_SCALE = 7.5


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) array in [-1, 1] -> float32 NCHW tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().to(torch.float64).numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


class Structure(NamedTuple):
    """Structure condition: query tokens f_s and the patch-token layout they were extracted from."""

    tokens: torch.Tensor
    layout: torch.Tensor


def structure_features(models: Models, y: torch.Tensor, variant: str = "full") -> Structure:
    """Structure condition for ``y``; the no-extractor ablation hands the raw image tokens to the adapter."""
    if variant == "no_qs":
        tokens = models.extractor_s.encoder(y)
        return Structure(tokens, tokens)
    layout, f_s = models.extractor_s.with_image_tokens(y, models.prompts)
    return Structure(f_s, layout)


def blur_tokens(models: Models, y: torch.Tensor) -> torch.Tensor:
    return models.extractor_b(y, models.prompts)


class GuidedDenoiser:
    """eps(z_t, t, text) for the sampler, with optional adapter residuals and blur tokens.

    Residuals depend only on (z_t, t), so both guidance branches of one
    sampler step reuse them.
    """

    def __init__(self, models: Models, structure: Structure | None = None, f_b=None):
        self.models = models
        self.structure = structure
        self.f_b = f_b
        self._last = None

    def residuals(self, z, t):
        if self.structure is None:
            return None
        if self._last is None or self._last[0] is not z or self._last[1] != t:
            self._last = (z, t, self.models.adapter(z, t, *self.structure))
        return self._last[2]

    def __call__(self, z, t, cond):
        tokens, mask = cond
        return self.models.unet(z, t, tokens, mask, blur=self.f_b, residuals=self.residuals(z, t))


def text_pair(models: Models, prompt, n: int):
    return models.prompts.batch([prompt] * n), models.prompts.batch([NULL_PROMPT] * n)


def init_noise(shape, seeds) -> torch.Tensor:
    """One N(0, I) latent per seed, so a batch result does not depend on its neighbours' seeds."""
    return torch.stack([torch.randn(tuple(shape), generator=torch.Generator().manual_seed(int(s))) for s in seeds])


@torch.no_grad()
def deblur_latents(models: Models, y: torch.Tensor, steps=DEFAULT_STEPS, scale=DEFAULT_SCALE, seeds=(0,),
                   variant="full", sched: NoiseSchedule | None = None, init=None) -> torch.Tensor:
    sched = sched or default_schedule()
    n = y.shape[0]
    structure = structure_features(models, y, variant)
    if init is None:
        c = models.config.unet.latent_channels
        init = init_noise((c, models.config.latent_size, models.config.latent_size), seeds)
    return sample(GuidedDenoiser(models, structure), init, steps, scale, text_pair(models, SHARP_PROMPT, n), sched=sched)


def refiner_ready(models: Models) -> bool:
    return bool(models.refiner.encoder_trained) and bool(models.refiner.decoder_trained)


@torch.no_grad()
def deblur_batch(models: Models, y: torch.Tensor, steps=DEFAULT_STEPS, scale=DEFAULT_SCALE, seeds=None,
                 variant="full", use_refiner=True, sched=None) -> tuple[torch.Tensor, bool]:
    """Deblur a batch; returns (images, whether the refined decoder was used)."""
    seeds = list(range(y.shape[0])) if seeds is None else seeds
    z = deblur_latents(models, y, steps, scale, seeds, variant, sched)
    refined = use_refiner and refiner_ready(models)
    if use_refiner and not refined:
        log.warning("refiner checkpoint missing; decoding with the plain VAE")
    if refined:
        _, skips = encode_refined(y, models.vae, models.refiner)
        return decode_refined(z, skips, models.vae, models.refiner), True
    return models.vae.decode(z), False


def deblur(y: np.ndarray, models: Models, steps: int = DEFAULT_STEPS, scale: float = DEFAULT_SCALE, seed: int = 0,
           variant: str = "full", use_refiner: bool = True) -> np.ndarray:
    out, _ = deblur_batch(models, to_tensor(y), steps, scale, [seed], variant, use_refiner)
    return to_image(out)


@torch.no_grad()
def blur_transfer(source_blurry: np.ndarray, target_sharp: np.ndarray, models: Models, strength: float = 0.6,
                  steps: int = DEFAULT_STEPS, seed: int = 0, scale: float = DEFAULT_SCALE,
                  sched: NoiseSchedule | None = None) -> np.ndarray:
    """Re-render ``target_sharp`` with the blur pattern extracted from ``source_blurry``."""
    if not 0 < strength <= 1:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    sched = sched or default_schedule()
    src, tgt = to_tensor(source_blurry), to_tensor(target_sharp)
    f_b = blur_tokens(models, src)
    z0 = models.vae.encode(tgt, "mean")
    t0 = math.ceil(strength * (sched.T - 1))
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(seed))
    z_t = add_noise(z0, eps, t0, sched)
    denoiser = GuidedDenoiser(models, f_b=f_b)
    z = sample(denoiser, z_t, min(steps, t0 + 1), scale, text_pair(models, BLURRY_PROMPT, 1), sched=sched, start=t0)
    return to_image(models.vae.decode(z))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    split: str
    model_tag: str
    rows: list[dict] = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    blurry_psnr: float = 0.0
    blurry_ssim: float = 0.0
    runtime_s: float = 0.0
    refined_decoder: bool = True
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def evaluate(manifest, models: Models, model_tag: str = "model", out=None, steps: int = DEFAULT_STEPS,
             scale: float = DEFAULT_SCALE, seed: int = 0, variant: str = "full", use_refiner: bool = True,
             batch: int = 25, limit: int | None = None) -> EvalReport:
    """Deblur every blurry test image and score it against its sharp pair."""
    import json

    pairs = manifest.test_pairs()[:limit]
    start = time.perf_counter()
    report = EvalReport("test", model_tag)
    for i in range(0, len(pairs), batch):
        chunk = pairs[i : i + batch]
        sharp = [blur_lab.load_image(manifest.path(s)) for s, _ in chunk]
        blurry = [blur_lab.load_image(manifest.path(b)) for _, b in chunk]
        seeds = [seed * 1_000_003 + b["scene_id"] for _, b in chunk]
        restored, refined = deblur_batch(models, to_tensor(np.stack(blurry)), steps, scale, seeds, variant,
                                         use_refiner)
        report.refined_decoder = refined
        imgs = restored.detach().to(torch.float64).numpy().transpose(0, 2, 3, 1)
        for (s_entry, _), x, y, x_hat in zip(chunk, sharp, blurry, imgs):
            report.rows.append({
                "scene_id": s_entry["scene_id"],
                "psnr": psnr(x_hat, x), "ssim": ssim(x_hat, x),
                "blurry_psnr": psnr(y, x), "blurry_ssim": ssim(y, x),
            })
    if use_refiner and not report.refined_decoder:
        report.warnings.append("refiner unavailable: plain VAE decoder used")
    report.mean_psnr = _mean(r["psnr"] for r in report.rows)
    report.mean_ssim = _mean(r["ssim"] for r in report.rows)
    report.blurry_psnr = _mean(r["blurry_psnr"] for r in report.rows)
    report.blurry_ssim = _mean(r["blurry_ssim"] for r in report.rows)
    report.runtime_s = time.perf_counter() - start
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report.to_json(), indent=1))
    return report


# ---------------------------------------------------------------- loading


def models_from_checkpoint(ckpt: Checkpoint | str | Path) -> Models:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    models = Models(ModelConfig.from_dict(ckpt.meta["model_config"]))
    restore_models(models, ckpt)
    return models.eval()


def restore_models(models: Models, ckpt: Checkpoint) -> None:
    state = {k[len("model."):]: v for k, v in ckpt.tensors.items() if k.startswith("model.")}
    models.load_state_dict(state, strict=True)
