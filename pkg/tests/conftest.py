import os
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from blurdecouple import blur_lab  # noqa: E402
from blurdecouple.models import build_models, mini_config  # noqa: E402

REPO = Path(__file__).resolve().parents[1]
RUNS = Path(os.environ.get("BLURDECOUPLE_RUNS", REPO / "runs"))

# short walks keep kernels inside 16 x 16 images
SMALL_WALK = blur_lab.DomainSpec("small_walk", "random_walk", steps=4, step_sigma=0.8, noise_sigma=0.02)
TINY_COUNTS = {"sharp": 16, "blurry": 16, "synthetic": 32, "test": 6}


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny") / "data"
    return blur_lab.build_dataset(blur_lab.SYNTHETIC_DOMAIN, blur_lab.TARGET_DOMAIN, TINY_COUNTS, 3, out)


@pytest.fixture(scope="session")
def tiny16_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny16") / "data"
    return blur_lab.build_dataset(blur_lab.SYNTHETIC_DOMAIN, SMALL_WALK, TINY_COUNTS, 4, out, size=16)


@pytest.fixture
def mini_models():
    return build_models(mini_config(), seed=0)


@pytest.fixture
def mini16_models():
    return build_models(mini_config(16), seed=0)


def randomize_(module: torch.nn.Module, seed: int = 0, scale: float = 0.1) -> torch.nn.Module:
    """Replace every all-zero parameter (zero-init projections, biases) with small random values."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if not p.any():
                p.copy_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))
    return module


# acceptance verdicts, printed as one line per criterion at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
