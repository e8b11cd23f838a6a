"""Variant sweeps sharing one pretrained autoencoder and base denoiser."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
from pathlib import Path

from .pipeline import evaluate, models_from_checkpoint
from .training import TrainConfig, run_phases

log = logging.getLogger(__name__)

SHARED_PHASES = ("vae_pretrain", "base_pretrain")
# Trained variants; "no_rvae" reuses the full model with the plain decoder.
TRAINED_VARIANTS = ("full", "no_t3", "no_t2t3", "no_qs")
ALL_VARIANTS = TRAINED_VARIANTS + ("no_rvae",)


def run_dir(root, variant: str, seed: int) -> Path:
    return Path(root) / f"{variant}_s{seed}"


def prepare_run(root, base_run, variant: str, seed: int) -> Path:
    """Create the run directory and copy in the shared pretraining checkpoints."""
    d = run_dir(root, variant, seed)
    d.mkdir(parents=True, exist_ok=True)
    for phase in SHARED_PHASES:
        src, dst = Path(base_run) / f"{phase}.ckpt", d / f"{phase}.ckpt"
        if not src.exists():
            raise FileNotFoundError(f"shared checkpoint missing: {src}")
        if not dst.exists() and src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
    return d


def ablate(manifest, base_run, root, seeds=(0, 1, 2), variants=ALL_VARIANTS, cfg: TrainConfig = TrainConfig(),
           steps: int = 30, scale: float = 7.5, eval_limit: int | None = None) -> dict:
    """Train (or reuse) every variant for every seed, evaluate, and write ``summary.json`` under ``root``."""
    root = Path(root)
    summary: dict = {"seeds": list(seeds), "variants": {}}
    for variant in variants:
        trained = "full" if variant == "no_rvae" else variant
        rows = {}
        for seed in seeds:
            d = prepare_run(root, base_run, trained, seed)
            run_phases(dataclasses.replace(cfg, variant=trained, seed=seed), manifest, d)
            report_path = d / f"eval_{variant}.json"
            if report_path.exists():
                report = json.loads(report_path.read_text())
            else:
                models = models_from_checkpoint(d / "refiner_dec.ckpt")
                report = evaluate(manifest, models, variant, report_path, steps, scale, seed=0,
                                  variant=trained, use_refiner=variant != "no_rvae", limit=eval_limit).to_json()
            rows[str(seed)] = {"psnr": report["mean_psnr"], "ssim": report["mean_ssim"]}
            log.info("%s seed %d: PSNR %.3f SSIM %.4f", variant, seed, report["mean_psnr"], report["mean_ssim"])
        summary["variants"][variant] = {
            "per_seed": rows,
            "mean_psnr": math.fsum(r["psnr"] for r in rows.values()) / len(rows),
            "mean_ssim": math.fsum(r["ssim"] for r in rows.values()) / len(rows),
        }
    root.mkdir(parents=True, exist_ok=True)
    (root / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
