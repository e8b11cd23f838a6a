"""Noise schedule, forward noising, deterministic DDIM and classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigurationError, NumericError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # float64, shape (T,)
    alpha_bars: np.ndarray  # float64, shape (T,)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal level; the terminal pseudo-step t = -1 has alpha_bar = 1."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bars[t])

    def timesteps(self, steps: int, start: int | None = None) -> list[int]:
        """Evenly spaced decreasing subsequence from ``start`` (default T-1) down to 0."""
        start = self.T - 1 if start is None else start
        if not 1 <= steps <= start + 1:
            raise ValueError(f"steps must be in [1, {start + 1}], got {steps}")
        if steps == 1:
            return [start]
        return [int(v) for v in np.round(np.linspace(start, 0, steps))]


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1 or not (0 < beta_start <= beta_end < 1):
        raise ConfigurationError(f"invalid schedule T={T}, beta=[{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(T, betas, np.cumprod(1.0 - betas))


def default_schedule() -> NoiseSchedule:
    # doubled betas: alpha_bar[T-1] ~ 5e-3, so a pure-noise start is close to the training distribution
    return make_linear_schedule(256, 2e-4, 0.04)


def _coef(sched: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    ab = torch.as_tensor(sched.alpha_bars, dtype=like.dtype)
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        if (t < 0).any() or (t >= sched.T).any():
            raise ValueError("timestep outside schedule range")
        return ab[t].reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(sched.alpha_bar(int(t)), dtype=like.dtype)


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` is an int or a per-sample LongTensor."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    ab = _coef(sched, t, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> torch.Tensor:
    """One eta = 0 DDIM update from t to t_prev (t_prev = -1 returns the clean estimate)."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    ab_t = _coef(sched, t, z_t)
    ab_prev = _coef(sched, t_prev, z_t)
    z0_hat = (z_t - (1 - ab_t).sqrt() * eps_hat) / ab_t.sqrt()
    if t_prev == -1:
        return z0_hat
    return ab_prev.sqrt() * z0_hat + (1 - ab_prev).sqrt() * eps_hat


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """eps_u + s (eps_c - eps_u), written so s = 0 and s = 1 reproduce the inputs exactly."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("shape mismatch between guidance branches")
    return (1.0 - scale) * eps_uncond + scale * eps_cond


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


@torch.no_grad()
def sample(
    denoiser: Denoiser,
    init,
    steps: int,
    scale: float,
    conds,
    seed: int = 0,
    sched: NoiseSchedule | None = None,
    start: int | None = None,
) -> torch.Tensor:
    """Deterministic DDIM loop with classifier-free guidance.

    ``init`` is either a latent tensor or a shape, in which case it is drawn
    from N(0, I) with ``seed``.  ``conds`` is a ``(cond, uncond)`` pair handed
    to ``denoiser(z_t, t, cond)``; with ``scale == 1`` the unconditional branch
    is skipped.
    """
    sched = sched or default_schedule()
    if isinstance(init, torch.Tensor):
        z = init.clone()
    else:
        z = torch.randn(tuple(init), generator=torch.Generator().manual_seed(seed))
    cond, uncond = conds
    ts = sched.timesteps(steps, start)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else -1
        eps_c = denoiser(z, t, cond)
        if scale == 1.0:
            eps = eps_c
        else:
            eps = cfg_combine(denoiser(z, t, uncond), eps_c, scale)
        if not torch.isfinite(eps).all():
            raise NumericError(f"denoiser returned non-finite values at step {i} (t={t})")
        z = ddim_step(z, eps, t, t_prev, sched)
    return z
