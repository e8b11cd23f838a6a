"""Task losses, the round-robin joint objective and the phase runner."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import blur_lab
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule, add_noise, default_schedule, sample
from .errors import ConfigurationError, NumericError, PhaseOrderError
from .extractors import BLURRY_PROMPT, NULL_PROMPT, SHARP_PROMPT
from .models import PHASES, ModelConfig, Models, apply_freezing, build_models
from .pipeline import GuidedDenoiser, blur_tokens, restore_models, structure_features, text_pair, to_tensor
from .vae import decode_refined, encode_refined, refiner_enc_loss, require_encoder_refiner, vae_pretrain_loss

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_t3", "no_t2t3", "no_qs")
TASK_CODES = {"vae": 0, "base": 1, "T1": 2, "T2": 3, "T3": 4, "R1": 5, "R2": 6}
R2_SAMPLER_STEPS = 8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 2000
    joint_steps: int = 6000
    alpha: float = 1 / 3
    beta: float = 1 / 3
    gamma: float = 1 / 3
    cfg_dropout_p: float = 0.1
    batch: int = 16
    seed: int = 0
    vae_steps: int = 3000
    base_steps: int = 5000
    refiner_enc_steps: int = 1000
    refiner_dec_steps: int = 500
    pretrain_lr: float = 2e-4
    weight_decay: float = 0.01
    guidance_scale: float = 7.5
    variant: str = "full"
    ckpt_every: int = 500

    def __post_init__(self):
        weights = (self.alpha, self.beta, self.gamma)
        if min(weights) <= 0 or abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigurationError(f"task weights must be positive and sum to 1, got {weights}")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.lr <= 0 or self.pretrain_lr <= 0 or self.batch < 1 or not 0 <= self.cfg_dropout_p < 1:
            raise ConfigurationError("lr, batch and cfg_dropout_p out of range")
        for f in ("warmup_steps", "joint_steps", "vae_steps", "base_steps", "refiner_enc_steps",
                  "refiner_dec_steps", "ckpt_every"):
            if getattr(self, f) < 0:
                raise ConfigurationError(f"{f} must be >= 0")

    def phase_steps(self, phase: str) -> int:
        return {
            "vae_pretrain": self.vae_steps, "base_pretrain": self.base_steps,
            "uid_warmup": self.warmup_steps, "uid_joint": self.joint_steps,
            "refiner_enc": self.refiner_enc_steps, "refiner_dec": self.refiner_dec_steps,
        }[phase]


def parse_values(text: str) -> dict:
    """Parse flat ``key=value`` lines (``#`` comments allowed); unknown keys are rejected."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        kind = type(fields[key].default)
        try:
            if kind is int:
                as_float = float(raw)
                if not as_float.is_integer():
                    raise ValueError(raw)
                values[key] = int(as_float)
            else:
                values[key] = kind(raw)
        except ValueError as e:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {raw!r}") from e
    return values


def parse_config(text: str, **overrides) -> TrainConfig:
    return TrainConfig(**{**parse_values(text), **overrides})


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(cfg).items())


# ---------------------------------------------------------------- data


@dataclass
class TaskBatch:
    task: str
    cond: torch.Tensor  # image(s) the extractors read
    target: torch.Tensor | None = None  # image(s) whose latent is denoised
    target_latent: torch.Tensor | None = None


def _stack(manifest, entries) -> torch.Tensor:
    return to_tensor(np.stack([blur_lab.load_image(manifest.path(e)) for e in entries]))


class TrainData:
    """In-memory training split; batches are drawn from a caller-supplied numpy Generator."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.sharp = _stack(manifest, manifest.role("sharp"))
        self.blurry = _stack(manifest, manifest.role("blurry"))
        pairs = manifest.synthetic_pairs()
        index = {e["scene_id"]: i for i, e in enumerate(manifest.role("sharp"))}
        self.synthetic = _stack(manifest, [b for _, b in pairs])
        self.synthetic_sharp = torch.tensor([index[s["scene_id"]] for s, _ in pairs])
        self.latents: dict[str, torch.Tensor] | None = None

    @torch.no_grad()
    def compute_latents(self, vae, chunk: int = 200) -> None:
        def enc(x):
            return torch.cat([vae.encode(x[i : i + chunk], "mean") for i in range(0, len(x), chunk)])

        self.latents = {"sharp": enc(self.sharp), "blurry": enc(self.blurry), "synthetic": enc(self.synthetic)}

    def _lat(self, name):
        if self.latents is None:
            raise PhaseOrderError("latents requested before the VAE was trained")
        return self.latents[name]

    def pretrain_images(self, rng, n) -> torch.Tensor:
        pool = torch.cat([self.sharp, self.blurry, self.synthetic]) if not hasattr(self, "_pool") else self._pool
        self._pool = pool
        return pool[torch.from_numpy(rng.integers(0, len(pool), n))]

    def base_batch(self, rng, n):
        """Half sharp scenes captioned sharp, half blurry images (both blur sets) captioned blurry."""
        blurry_lat = torch.cat([self._lat("blurry"), self._lat("synthetic")])
        is_sharp = rng.random(n) < 0.5
        i_s = torch.from_numpy(rng.integers(0, len(self.sharp), n))
        i_b = torch.from_numpy(rng.integers(0, len(blurry_lat), n))
        z = torch.where(torch.from_numpy(is_sharp)[:, None, None, None], self._lat("sharp")[i_s], blurry_lat[i_b])
        return z, [SHARP_PROMPT if s else BLURRY_PROMPT for s in is_sharp]

    def synthetic_pair_images(self, rng, n):
        idx = torch.from_numpy(rng.integers(0, len(self.synthetic), n))
        return self.sharp[self.synthetic_sharp[idx]], self.synthetic[idx]

    def task_batch(self, task: str, rng, n: int) -> TaskBatch:
        if task == "T1":
            idx = torch.from_numpy(rng.integers(0, len(self.synthetic), n))
            return TaskBatch("T1", self.synthetic[idx], target_latent=self._lat("sharp")[self.synthetic_sharp[idx]])
        nb = len(self.blurry)
        i = rng.integers(0, nb, n)
        if task == "T2":
            j = (i + rng.integers(1, nb, n)) % nb
            return TaskBatch("T2", self.blurry[torch.from_numpy(i)], target_latent=self._lat("blurry")[torch.from_numpy(j)])
        if task == "T3":
            i = torch.from_numpy(i)
            return TaskBatch("T3", self.blurry[i], target_latent=self._lat("blurry")[i])
        raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- losses


def _draws(seed: int, shape, T: int):
    g = torch.Generator().manual_seed(int(seed))
    t = torch.randint(0, T, (shape[0],), generator=g)
    eps = torch.randn(tuple(shape), generator=g)
    u = torch.rand(shape[0], generator=g)
    return t, eps, u


def drop_prompts(prompts, u: torch.Tensor, p: float) -> list:
    """Replace prompt i by the null prompt when u[i] < p (classifier-free guidance dropout)."""
    return [NULL_PROMPT if float(ui) < p else pr for ui, pr in zip(u, prompts)]


def denoising_loss(models: Models, z0, prompts, seed: int, sched: NoiseSchedule, cfg_dropout_p: float = 0.0,
                   structure=None, f_b=None) -> torch.Tensor:
    """Mean over the batch of ||eps - eps_hat||^2; prompts drop to the null prompt with prob p."""
    t, eps, u = _draws(seed, z0.shape, sched.T)
    z_t = add_noise(z0, eps, t, sched)
    prompts = drop_prompts(prompts, u, cfg_dropout_p)
    tokens, mask = models.prompts.batch(prompts)
    residuals = models.adapter(z_t, t, *structure) if structure is not None else None
    eps_hat = models.unet(z_t, t, tokens, mask, blur=f_b, residuals=residuals)
    return (eps - eps_hat).pow(2).flatten(1).sum(1).mean()


def _target_latent(batch: TaskBatch, models: Models):
    if batch.target_latent is not None:
        return batch.target_latent
    with torch.no_grad():
        return models.vae.encode(batch.target, "mean")


def _check_task(batch: TaskBatch, task: str):
    if batch.task != task:
        raise ValueError(f"expected a {task} batch, got {batch.task}")


def loss_deblur(batch: TaskBatch, models: Models, sched: NoiseSchedule, seed: int, cfg_dropout_p: float = 0.0,
                prompt=SHARP_PROMPT, variant: str = "full") -> torch.Tensor:
    """Denoise the sharp latent conditioned on structure tokens of its synthetic blur."""
    _check_task(batch, "T1")
    z0 = _target_latent(batch, models)
    structure = structure_features(models, batch.cond, variant)
    return denoising_loss(models, z0, [prompt] * len(z0), seed, sched, cfg_dropout_p, structure=structure)


def loss_blur_transfer(batch: TaskBatch, models: Models, sched: NoiseSchedule, seed: int, cfg_dropout_p: float = 0.0,
                       prompt=BLURRY_PROMPT, variant: str = "full") -> torch.Tensor:
    """Denoise one target-domain image conditioned on blur tokens of another."""
    _check_task(batch, "T2")
    z0 = _target_latent(batch, models)
    f_b = blur_tokens(models, batch.cond)
    return denoising_loss(models, z0, [prompt] * len(z0), seed, sched, cfg_dropout_p, f_b=f_b)


def loss_reconstruct(batch: TaskBatch, models: Models, sched: NoiseSchedule, seed: int, cfg_dropout_p: float = 0.0,
                     prompt=(SHARP_PROMPT, BLURRY_PROMPT), variant: str = "full") -> torch.Tensor:
    """Reconstruct a target-domain image from its own structure and blur tokens."""
    _check_task(batch, "T3")
    z0 = _target_latent(batch, models)
    structure = structure_features(models, batch.cond, variant)
    f_b = blur_tokens(models, batch.cond)
    return denoising_loss(models, z0, [prompt] * len(z0), seed, sched, cfg_dropout_p, structure=structure, f_b=f_b)


TASK_LOSSES = {"T1": loss_deblur, "T2": loss_blur_transfer, "T3": loss_reconstruct}


def refiner_dec_loss(x, y, models: Models, sched: NoiseSchedule | None = None, seed: int = 0,
                     steps: int = R2_SAMPLER_STEPS, scale: float = 7.5, variant: str = "full",
                     denoiser=None) -> torch.Tensor:
    """Pixel MSE between ``x`` and the refined decode of the deblurring sampler run on y's noised latent."""
    require_encoder_refiner(models.refiner)
    sched = sched or default_schedule()
    with torch.no_grad():
        z, skips = encode_refined(y, models.vae, models.refiner)
        eps = torch.randn(z.shape, generator=torch.Generator().manual_seed(int(seed)))
        start = sched.T - 1
        z_t = add_noise(z, eps, start, sched)
        if denoiser is None:
            denoiser = GuidedDenoiser(models, structure_features(models, y, variant))
        z_hat = sample(denoiser, z_t, steps, scale, text_pair(models, SHARP_PROMPT, len(y)), sched=sched, start=start)
    x_hat = decode_refined(z_hat, skips, models.vae, models.refiner, clamp=False)
    return F.mse_loss(x_hat, x)


# ---------------------------------------------------------------- schedule


def active_tasks(phase: str, cfg: TrainConfig) -> dict[str, float]:
    if phase == "uid_warmup":
        tasks = {"T1": cfg.alpha, "T2": cfg.beta}
    elif phase == "uid_joint":
        tasks = {"T1": cfg.alpha, "T2": cfg.beta, "T3": cfg.gamma}
    else:
        return {{"vae_pretrain": "vae", "base_pretrain": "base", "refiner_enc": "R1",
                 "refiner_dec": "R2"}[phase]: 1.0}
    if cfg.variant == "no_t3":
        tasks.pop("T3", None)
    elif cfg.variant in ("no_t2t3", "no_qs"):
        tasks = {"T1": 1.0}
    return tasks


def task_sequence(weights: dict[str, float], n: int) -> list[str]:
    """Smooth weighted round-robin; equal weights give a plain cycle in insertion order."""
    w = {k: Fraction(v).limit_denominator(10**6) for k, v in weights.items()}
    total = sum(w.values())
    current = {k: Fraction(0) for k in w}
    out = []
    for _ in range(n):
        for k in w:
            current[k] += w[k]
        pick = max(w, key=lambda k: current[k])  # first key wins ties
        current[pick] -= total
        out.append(pick)
    return out


def step_seed(seed: int, phase: str, step: int) -> int:
    return int(np.random.SeedSequence([seed, PHASES.index(phase), step]).generate_state(1)[0] & 0x7FFFFFFF)


def make_optimizer(params, cfg: TrainConfig, phase: str) -> torch.optim.AdamW:
    lr = cfg.pretrain_lr if phase in ("vae_pretrain", "base_pretrain") else cfg.lr
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay)


def train_step(step: int, cfg: TrainConfig, data: TrainData, models: Models, opt, phase: str,
               tasks: list[str], sched: NoiseSchedule) -> tuple[float, str]:
    """One optimizer update on the task scheduled for ``step``; returns (loss, task)."""
    task = tasks[step]
    seed = step_seed(cfg.seed, phase, step)
    rng = np.random.default_rng(seed)
    n = cfg.batch
    if task in TASK_LOSSES:
        batch = data.task_batch(task, rng, n)
        loss = TASK_LOSSES[task](batch, models, sched, seed, cfg.cfg_dropout_p, variant=cfg.variant)
    elif task == "vae":
        loss = vae_pretrain_loss(data.pretrain_images(rng, n), models.vae, seed)
    elif task == "base":
        z0, prompts = data.base_batch(rng, n)
        loss = denoising_loss(models, z0, prompts, seed, sched, cfg.cfg_dropout_p)
    elif task == "R1":
        x, y = data.synthetic_pair_images(rng, n)
        loss = refiner_enc_loss(x, y, models.vae, models.refiner)
    else:
        x, y = data.synthetic_pair_images(rng, n)
        loss = refiner_dec_loss(x, y, models, sched, seed, R2_SAMPLER_STEPS, cfg.guidance_scale, cfg.variant)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss in phase {phase}: task={task} step={step} batch_seed={seed}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach()), task


# ---------------------------------------------------------------- checkpoints


def _optimizer_tensors(opt) -> dict[str, torch.Tensor]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"optim.{idx}.{key}"] = torch.as_tensor(val)
    return out


def _restore_optimizer(opt, tensors: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for name, t in tensors.items():
        if name.startswith("optim."):
            _, idx, key = name.split(".", 2)
            state.setdefault(int(idx), {})[key] = t
    sd["state"] = state
    opt.load_state_dict(sd)


def make_checkpoint(models: Models, phase: str, cfg: TrainConfig, step: int, trace: list[tuple[float, str]],
                    opt=None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in models.state_dict().items()}
    tensors["trace.loss"] = torch.tensor([l for l, _ in trace], dtype=torch.float64)
    tensors["trace.task"] = torch.tensor([TASK_CODES[t] for _, t in trace], dtype=torch.int8)
    if opt is not None:
        tensors.update(_optimizer_tensors(opt))
    meta = {"step": step, "train_config": dataclasses.asdict(cfg),
            "model_config": models.config.to_dict(), "seeds": {"train": cfg.seed}}
    return Checkpoint(phase, tensors, meta)


def loss_trace(ckpt: Checkpoint) -> list[tuple[float, str]]:
    codes = {v: k for k, v in TASK_CODES.items()}
    return [(float(l), codes[int(c)]) for l, c in zip(ckpt.tensors["trace.loss"], ckpt.tensors["trace.task"])]


def reinit_uid_modules(models: Models, seed: int) -> None:
    """Fresh, seed-dependent initialization for everything trained after base pretraining."""
    fresh = build_models(models.config, seed + 7919)
    state = fresh.state_dict()
    keep = {k: v for k, v in state.items()
            if k.split(".", 1)[0] in ("extractor_s", "extractor_b", "adapter", "refiner")
            or ".to_k_blur." in k or ".to_v_blur." in k}
    models.load_state_dict(keep, strict=False)


def calibrate_latent_scale(models: Models, data: TrainData) -> float:
    with torch.no_grad():
        models.vae.latent_scale.fill_(1.0)
        sample_imgs = torch.cat([data.sharp[:200], data.blurry[:200]])
        std = float(models.vae.encode(sample_imgs, "mean").std())
        models.vae.latent_scale.fill_(1.0 / std)
    return 1.0 / std


def run_phase(phase: str, cfg: TrainConfig, data: TrainData, out_dir, model_config: ModelConfig = ModelConfig(),
              stop_at: int | None = None, sched: NoiseSchedule | None = None) -> Path | None:
    """Run (or resume) one phase; returns the final checkpoint path, or None when stopped early."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = sched or default_schedule()
    idx = PHASES.index(phase)
    final = out / f"{phase}.ckpt"
    partial = out / f"{phase}.partial.ckpt"
    if idx > 0:
        prev = out / f"{PHASES[idx - 1]}.ckpt"
        if not prev.exists():
            raise PhaseOrderError(f"{phase} requires {prev.name}")
        prev_ckpt = load_checkpoint(prev)
        models = Models(ModelConfig.from_dict(prev_ckpt.meta["model_config"]))
        restore_models(models, prev_ckpt)
    else:
        models = build_models(model_config, cfg.seed)
    if phase == "refiner_dec":
        require_encoder_refiner(models.refiner)
    if phase == "uid_warmup":
        reinit_uid_modules(models, cfg.seed)
    if phase != "vae_pretrain":
        data.compute_latents(models.vae)

    params = apply_freezing(models, phase)
    opt = make_optimizer(params, cfg, phase)
    tasks = task_sequence(active_tasks(phase, cfg), cfg.phase_steps(phase))
    step, trace = 0, []
    if partial.exists():
        ck = load_checkpoint(partial)
        restore_models(models, ck)
        _restore_optimizer(opt, ck.tensors)
        step, trace = ck.meta["step"], loss_trace(ck)
        log.info("resuming %s at step %d", phase, step)

    while step < len(tasks):
        if stop_at is not None and step >= stop_at:
            save_checkpoint(partial, make_checkpoint(models, phase, cfg, step, trace, opt))
            return None
        trace.append(train_step(step, cfg, data, models, opt, phase, tasks, sched))
        step += 1
        if step % 100 == 0 or step == len(tasks):
            recent = [l for l, _ in trace[-100:]]
            log.info("%s step %d/%d loss %.5f", phase, step, len(tasks), sum(recent) / len(recent))
        if cfg.ckpt_every and step % cfg.ckpt_every == 0 and step < len(tasks):
            save_checkpoint(partial, make_checkpoint(models, phase, cfg, step, trace, opt))

    if phase == "vae_pretrain":
        log.info("latent scale %.4f", calibrate_latent_scale(models, data))
    elif phase == "refiner_enc":
        models.refiner.encoder_trained.fill_(True)
    elif phase == "refiner_dec":
        models.refiner.decoder_trained.fill_(True)
    for p in models.parameters():
        p.requires_grad_(True)
    save_checkpoint(final, make_checkpoint(models, phase, cfg, step, trace))
    partial.unlink(missing_ok=True)
    return final


def run_phases(cfg: TrainConfig, manifest, out_dir, model_config: ModelConfig = ModelConfig(),
               phases=PHASES, stop_at: tuple[str, int] | None = None) -> dict[str, Path]:
    """Run every phase in order, skipping phases whose checkpoint already exists."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.txt").write_text(dump_config(cfg), encoding="utf-8")
    data = TrainData(manifest)
    done = {}
    for phase in phases:
        path = out / f"{phase}.ckpt"
        if not path.exists():
            stop = stop_at[1] if stop_at and stop_at[0] == phase else None
            if run_phase(phase, cfg, data, out, model_config, stop_at=stop) is None:
                return done
        done[phase] = path
    return done
