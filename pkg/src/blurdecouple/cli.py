"""Command line entry point: ``blurdecouple <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import blur_lab
from .errors import ConfigurationError, IntegrityError, NumericError, PhaseOrderError

EXIT_CODES = [
    (ConfigurationError, 2),
    (PhaseOrderError, 3),
    (IntegrityError, 4),
    (NumericError, 5),
    (Exception, 1),
]


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, default=str))


def _counts(args) -> dict:
    counts = dict(blur_lab.GOPRO_SPLIT if args.gopro_counts else blur_lab.DEFAULT_COUNTS)
    for role in counts:
        if getattr(args, role) is not None:
            counts[role] = getattr(args, role)
    return counts


def _train_config(args, **extra):
    from .training import TrainConfig, load_config, parse_values

    overrides = parse_values("\n".join(args.set or []))
    overrides.update(extra)
    if args.config:
        return load_config(args.config, **overrides)
    return TrainConfig(**overrides)


def _model_config(name: str):
    from .models import ModelConfig, mini_config

    return mini_config() if name == "mini" else ModelConfig()


def cmd_gen_data(args) -> dict:
    m = blur_lab.build_dataset(blur_lab.SYNTHETIC_DOMAIN, blur_lab.TARGET_DOMAIN, _counts(args), args.seed,
                               args.out, overwrite=args.overwrite, size=args.size)
    return {"manifest": str(Path(args.out) / "manifest.json"),
            "counts": {r: len(m.role(r)) for r in ("sharp", "blurry", "synthetic", "test_blurry")}}


def cmd_train(args) -> dict:
    from .training import run_phases

    cfg = _train_config(args)
    manifest = blur_lab.load_manifest(args.data)
    phases = tuple(args.phases) if args.phases else None
    kwargs = {"phases": phases} if phases else {}
    done = run_phases(cfg, manifest, args.out, _model_config(args.model), **kwargs)
    return {"checkpoints": {k: str(v) for k, v in done.items()}}


def cmd_deblur(args) -> dict:
    from .pipeline import deblur, models_from_checkpoint, refiner_ready

    models = models_from_checkpoint(args.ckpt)
    out = deblur(blur_lab.load_image(args.input), models, args.steps, args.scale, args.seed, args.variant,
                 not args.no_refiner)
    blur_lab.save_image(args.output, out)
    return {"output": args.output, "refined_decoder": (not args.no_refiner) and refiner_ready(models)}


def cmd_blur_transfer(args) -> dict:
    from .pipeline import blur_transfer, models_from_checkpoint

    models = models_from_checkpoint(args.ckpt)
    out = blur_transfer(blur_lab.load_image(args.source), blur_lab.load_image(args.target), models,
                        args.strength, args.steps, args.seed, args.scale)
    blur_lab.save_image(args.output, out)
    return {"output": args.output}


def cmd_evaluate(args) -> dict:
    from .pipeline import evaluate, models_from_checkpoint

    report = evaluate(blur_lab.load_manifest(args.data), models_from_checkpoint(args.ckpt), args.tag, args.out,
                      args.steps, args.scale, args.seed, args.variant, not args.no_refiner, limit=args.limit)
    summary = report.to_json()
    summary.pop("rows")
    return summary


def cmd_ablate(args) -> dict:
    from .ablation import ablate

    return ablate(blur_lab.load_manifest(args.data), args.base_run, args.out, args.seeds, args.variants,
                  _train_config(args), args.steps, args.scale, args.limit)


def _sampling_flags(p, seed=True):
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--scale", type=float, default=7.5)
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _config_flags(p):
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")


def build_parser() -> argparse.ArgumentParser:
    from .ablation import ALL_VARIANTS
    from .models import PHASES
    from .training import VARIANTS

    parser = argparse.ArgumentParser(prog="blurdecouple", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--gopro-counts", action="store_true", help="use the full-size split counts")
    for role in ("sharp", "blurry", "synthetic", "test"):
        p.add_argument(f"--{role}", type=int)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run (or resume) the training phases")
    p.add_argument("--data", required=True, help="manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=("toy", "mini"), default="toy")
    p.add_argument("--phases", nargs="+", choices=PHASES)
    _config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deblur", help="deblur one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--no-refiner", action="store_true")
    _sampling_flags(p)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("blur-transfer", help="re-render a sharp image with another image's blur")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="blurry image providing the blur pattern")
    p.add_argument("--target", required=True, help="sharp image providing the content")
    p.add_argument("--output", required=True)
    p.add_argument("--strength", type=float, default=0.6)
    _sampling_flags(p)
    p.set_defaults(func=cmd_blur_transfer)

    p = sub.add_parser("evaluate", help="score deblurring on the paired test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--tag", default="model")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--no-refiner", action="store_true")
    p.add_argument("--limit", type=int)
    _sampling_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--base-run", required=True, help="run directory holding the pretrained autoencoder and base")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", choices=ALL_VARIANTS, default=list(ALL_VARIANTS))
    p.add_argument("--limit", type=int)
    _config_flags(p)
    _sampling_flags(p, seed=False)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        _print(args.func(args))
    except Exception as e:  # noqa: BLE001 - mapped to exit codes below
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return next(code for cls, code in EXIT_CODES if isinstance(e, cls))
    return 0


if __name__ == "__main__":
    sys.exit(main())
