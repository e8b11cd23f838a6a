"""The model bundle and the per-phase trainable/frozen parameter partition."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigurationError
from .extractors import BLUR_PROMPT, STRUCTURE_PROMPT, Extractor, PromptTable
from .networks import Adapter, UNet, UNetSpec
from .vae import VAE, Refiner

PHASES = ("vae_pretrain", "base_pretrain", "uid_warmup", "uid_joint", "refiner_enc", "refiner_dec")
BLUR_BRANCH = ("to_k_blur", "to_v_blur")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    unet: UNetSpec = field(default_factory=UNetSpec)
    vae_channels: tuple[int, int, int] = (32, 64, 128)
    encoder_channels: tuple[int, int, int] = (32, 64, 128)
    qformer_layers: int = 2

    @property
    def latent_size(self) -> int:
        return self.image_size // 8

    @property
    def d_model(self) -> int:
        return self.unet.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        u = d["unet"]
        spec = UNetSpec(tuple(tuple(lv) for lv in u["levels"]), u["latent_channels"], u["d_model"],
                        u["time_embed_dim"], u["heads"])
        return cls(d["image_size"], spec, tuple(d["vae_channels"]), tuple(d["encoder_channels"]), d["qformer_layers"])


def mini_config(image_size: int = 64) -> ModelConfig:
    """Miniature configuration (8-wide attention, 8 x 8 latents by default) for gradient checks and fast tests."""
    return ModelConfig(
        image_size=image_size,
        unet=UNetSpec(levels=((8, True), (8, True)), d_model=8, time_embed_dim=8, heads=2),
        vae_channels=(4, 8, 8),
        encoder_channels=(4, 8, 8),
        qformer_layers=1,
    )


class Models(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        d = config.d_model
        heads = config.unet.heads
        self.prompts = PromptTable(d)
        self.unet = UNet(config.unet)
        self.vae = VAE(config.vae_channels, config.unet.latent_channels)
        self.refiner = Refiner(config.vae_channels)
        self.extractor_s = Extractor(d, STRUCTURE_PROMPT, config.encoder_channels, config.image_size,
                                     config.qformer_layers, heads)
        self.extractor_b = Extractor(d, BLUR_PROMPT, config.encoder_channels, config.image_size,
                                     config.qformer_layers, heads)
        self.adapter = Adapter(config.unet, config.latent_size)


def build_models(config: ModelConfig = ModelConfig(), seed: int = 0) -> Models:
    torch.manual_seed(seed)
    return Models(config)


def _group(name: str) -> str:
    top = name.split(".", 1)[0]
    if top == "unet":
        return "blur_branch" if any(f".{k}." in name for k in BLUR_BRANCH) else "unet_core"
    if top == "refiner":
        return "refiner_" + name.split(".")[1]
    return top


TRAINABLE_GROUPS = {
    "vae_pretrain": {"vae"},
    "base_pretrain": {"unet_core", "prompts"},
    "uid_warmup": {"extractor_s", "extractor_b", "adapter", "blur_branch"},
    "uid_joint": {"extractor_s", "extractor_b", "adapter", "blur_branch"},
    "refiner_enc": {"refiner_enc"},
    "refiner_dec": {"refiner_dec"},
}


def parameter_groups(models: nn.Module) -> dict[str, set[str]]:
    groups: dict[str, set[str]] = {}
    for name, _ in models.named_parameters():
        groups.setdefault(_group(name), set()).add(name)
    return groups


def count_trainable(models: nn.Module, phase: str) -> dict[str, set[str]]:
    """Partition parameter names into ``{"trainable", "frozen"}`` for ``phase``."""
    if phase not in TRAINABLE_GROUPS:
        raise ConfigurationError(f"unknown phase {phase!r}")
    keep = TRAINABLE_GROUPS[phase]
    out = {"trainable": set(), "frozen": set()}
    for name, _ in models.named_parameters():
        out["trainable" if _group(name) in keep else "frozen"].add(name)
    return out


def apply_freezing(models: nn.Module, phase: str) -> list[nn.Parameter]:
    part = count_trainable(models, phase)
    params = []
    for name, p in models.named_parameters():
        p.requires_grad_(name in part["trainable"])
        if p.requires_grad:
            params.append(p)
    return params


def tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def group_hashes(models: nn.Module) -> dict[str, str]:
    """SHA-256 per parameter group, over the raw bytes of its tensors in name order."""
    params = dict(models.named_parameters())
    out = {}
    for group, names in sorted(parameter_groups(models).items()):
        h = hashlib.sha256()
        for n in sorted(names):
            h.update(params[n].detach().contiguous().numpy().tobytes())
        out[group] = h.hexdigest()
    return out
