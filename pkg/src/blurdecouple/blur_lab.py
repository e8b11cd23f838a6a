"""Blur kernels, degradation model, procedural scenes and the unpaired dataset.

Images here are float64 arrays of shape (H, W, 3) in [-1, 1].  The model code
converts them to float32 NCHW tensors at its own boundary.
"""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError

FAMILIES = ("delta", "linear_motion", "random_walk", "defocus")

# Sharp / blurry / synthetic-pair / test counts of the GoPro unknown-domain split.
GOPRO_SPLIT = {"sharp": 1261, "blurry": 842, "synthetic": 4210, "test": 1111}
DEFAULT_COUNTS = {"sharp": 600, "blurry": 400, "synthetic": 2000, "test": 200}


@dataclass(frozen=True)
class DomainSpec:
    """A blur domain: a kernel family with parameter ranges plus additive noise."""

    name: str
    family: str
    length: tuple[float, float] = (3, 9)
    angle: tuple[float, float] = (0.0, 180.0)
    steps: int = 16
    step_sigma: float = 1.0
    radius: tuple[float, float] = (1.0, 3.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.family!r}")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.family == "linear_motion":
            lo, hi = self.length
            if not (1 <= lo <= hi) or int(lo) != lo or int(hi) != hi:
                raise ConfigurationError(f"bad length range {self.length}")
            if not self.angle[0] <= self.angle[1]:
                raise ConfigurationError(f"bad angle range {self.angle}")
        elif self.family == "random_walk":
            if self.steps < 1 or self.step_sigma <= 0:
                raise ConfigurationError("random_walk needs steps >= 1 and step_sigma > 0")
        elif self.family == "defocus":
            lo, hi = self.radius
            if not (0 < lo <= hi):
                raise ConfigurationError(f"bad radius range {self.radius}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("length", "angle", "radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


SYNTHETIC_DOMAIN = DomainSpec("synthetic_linear", "linear_motion", length=(3, 9), angle=(0.0, 180.0))
TARGET_DOMAIN = DomainSpec("unknown_walk", "random_walk", steps=16, step_sigma=1.2, noise_sigma=0.02)


# ---------------------------------------------------------------- kernels


def _splat(points: np.ndarray) -> np.ndarray:
    """Bilinearly splat equal-weight 2-D offsets (x, y) into an odd K x K grid."""
    points = np.round(points, 9)
    radius = int(math.ceil(np.abs(points).max())) if len(points) else 0
    size = 2 * radius + 1
    k = np.zeros((size, size))
    for px, py in points + radius:
        x0, y0 = math.floor(px), math.floor(py)
        fx, fy = px - x0, py - y0
        for dx, wx in ((0, 1 - fx), (1, fx)):
            for dy, wy in ((0, 1 - fy), (1, fy)):
                w = wx * wy
                if w > 0:
                    k[y0 + dy, x0 + dx] += w
    return k


def _disk(r: float, supersample: int = 8) -> np.ndarray:
    radius = int(math.ceil(r))
    size = 2 * radius + 1
    offs = (np.arange(size * supersample) + 0.5) / supersample - radius - 0.5
    xx, yy = np.meshgrid(offs, offs)
    inside = (xx**2 + yy**2 <= r * r).astype(np.float64)
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def make_kernel(spec: DomainSpec, seed: int) -> np.ndarray:
    """Sample a normalized blur kernel from ``spec``'s family, deterministic per seed."""
    rng = np.random.default_rng(seed)
    if spec.family == "delta":
        k = np.ones((1, 1))
    elif spec.family == "linear_motion":
        length = int(rng.integers(int(spec.length[0]), int(spec.length[1]) + 1))
        theta = math.radians(rng.uniform(*spec.angle)) if spec.angle[1] > spec.angle[0] else math.radians(spec.angle[0])
        s = np.arange(length) - (length - 1) / 2
        k = _splat(np.stack([s * math.cos(theta), s * math.sin(theta)], axis=1))
    elif spec.family == "random_walk":
        steps = rng.normal(0.0, spec.step_sigma, size=(spec.steps, 2))
        path = np.concatenate([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
        k = _splat(path - path.mean(axis=0))
    else:
        lo, hi = spec.radius
        k = _disk(rng.uniform(lo, hi) if hi > lo else lo)
    return k / k.sum()


# ---------------------------------------------------------------- blur model


def apply_blur(x: np.ndarray, k: np.ndarray, noise_sigma: float = 0.0, seed: int = 0) -> np.ndarray:
    """Channelwise convolution with reflect padding, additive Gaussian noise, clamp to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be odd and square, got {k.shape}")
    if k.shape[0] > x.shape[0] or k.shape[1] > x.shape[1]:
        raise ValueError(f"kernel {k.shape} larger than image {x.shape[:2]}")
    # scipy's "mirror" is the edge-exclusive reflection (d c b | a b c d)
    y = np.stack([ndimage.convolve(x[..., c], k, mode="mirror") for c in range(x.shape[2])], axis=-1)
    if noise_sigma > 0:
        y = y + noise_sigma * np.random.default_rng(seed).standard_normal(y.shape)
    return np.clip(y, -1.0, 1.0)


# ---------------------------------------------------------------- scenes


def _coverage(sd: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - sd, 0.0, 1.0)


def _box_sd(px, py, cx, cy, hw, hh, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = np.abs(c * (px - cx) + s * (py - cy)) - hw
    v = np.abs(-s * (px - cx) + c * (py - cy)) - hh
    outside = np.hypot(np.maximum(u, 0), np.maximum(v, 0))
    return outside + np.minimum(np.maximum(u, v), 0)


def edge_strength(img: np.ndarray) -> float:
    """Max forward-difference gradient magnitude of the channel mean."""
    m = np.asarray(img).mean(axis=-1)
    gx = np.diff(m, axis=1)[:-1, :]
    gy = np.diff(m, axis=0)[:, :-1]
    return float(np.sqrt(gx**2 + gy**2).max())


def _primitive(rng: np.random.Generator, px, py, size: int):
    kind = rng.choice(["rect", "disk", "line", "grating"])
    cx, cy = rng.uniform(0.1, 0.9, size=2) * size
    theta = rng.uniform(0, math.pi)
    if kind == "rect":
        hw, hh = rng.uniform(0.06, 0.25, size=2) * size
        return _coverage(_box_sd(px, py, cx, cy, hw, hh, theta))
    if kind == "disk":
        r = rng.uniform(0.05, 0.22) * size
        return _coverage(np.hypot(px - cx, py - cy) - r)
    if kind == "line":
        half = rng.uniform(0.15, 0.45) * size
        ax, ay = cx - half * math.cos(theta), cy - half * math.sin(theta)
        bx, by = cx + half * math.cos(theta), cy + half * math.sin(theta)
        dx, dy = bx - ax, by - ay
        h = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0, 1)
        dist = np.hypot(px - ax - h * dx, py - ay - h * dy)
        return _coverage(dist - rng.uniform(0.75, 2.5))
    hw, hh = rng.uniform(0.12, 0.3, size=2) * size
    period = rng.uniform(3.0, 8.0)
    u = math.cos(theta) * (px - cx) + math.sin(theta) * (py - cy)
    s = u / period
    e = np.abs(np.mod(s - 0.25 + 0.5, 1.0) - 0.5)
    return _coverage(_box_sd(px, py, cx, cy, hw, hh, theta)) * _coverage(period * (e - 0.25))


def gen_scene(seed: int, size: int = 64) -> np.ndarray:
    """Composite 3-8 anti-aliased primitives over a linear-gradient background."""
    rng = np.random.default_rng(seed)
    coords = np.arange(size) + 0.5
    px, py = np.meshgrid(coords, coords)
    c0, c1 = rng.uniform(-0.8, 0.8, size=(2, 3))
    phi = rng.uniform(0, 2 * math.pi)
    ramp = (math.cos(phi) * (px - size / 2) + math.sin(phi) * (py - size / 2)) / size + 0.5
    img = c0 + (c1 - c0) * np.clip(ramp, 0, 1)[..., None]
    for _ in range(int(rng.integers(3, 9))):
        alpha = _primitive(rng, px, py, size)[..., None]
        img = img * (1 - alpha) + rng.uniform(-1, 1, size=3) * alpha
    while edge_strength(img) <= 0.5:
        alpha = _primitive(rng, px, py, size)[..., None]
        base = img.mean(axis=(0, 1)).mean()
        img = img * (1 - alpha) + (-np.sign(base) or 1.0) * np.full(3, 0.9) * alpha
    return np.clip(img, -1.0, 1.0)


# ---------------------------------------------------------------- image io


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * (np.asarray(img, dtype=np.float64) + 1.0) / 2.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0 * 2.0 - 1.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through the 8-bit storage format."""
    return from_uint8(to_uint8(img))


def save_image(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


# ---------------------------------------------------------------- dataset


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    domains: dict[str, DomainSpec]
    entries: list[dict] = field(default_factory=list)

    def role(self, role: str) -> list[dict]:
        return [e for e in self.entries if e["role"] == role]

    def path(self, entry: dict) -> Path:
        return self.root / entry["file"]

    def synthetic_pairs(self) -> list[tuple[dict, dict]]:
        """(sharp entry, synthetic blurry entry) for every element of the synthetic set."""
        sharp = {e["scene_id"]: e for e in self.role("sharp")}
        return [(sharp[e["scene_id"]], e) for e in self.role("synthetic")]

    def test_pairs(self) -> list[tuple[dict, dict]]:
        sharp = {e["scene_id"]: e for e in self.role("test_sharp")}
        return [(sharp[e["scene_id"]], e) for e in self.role("test_blurry")]

    def to_json(self) -> dict:
        return {
            "version": 1,
            "seed": self.seed,
            "domains": {k: v.to_dict() for k, v in self.domains.items()},
            "entries": self.entries,
        }


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_dataset(
    syn_domain: DomainSpec = SYNTHETIC_DOMAIN,
    target_domain: DomainSpec = TARGET_DOMAIN,
    counts: dict | None = None,
    seed: int = 0,
    out_dir="data",
    overwrite: bool = False,
    size: int = 64,
) -> DatasetManifest:
    """Write the unpaired split (sharp, blurry, synthetic pairs, paired test) and its manifest.

    Sharp and blurry sets come from disjoint scenes; synthetic pairs blur the
    sharp set with ``syn_domain``; the test set pairs unseen scenes with
    ``target_domain`` blur.
    """
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    if any(int(v) <= 0 for v in counts.values()):
        raise ConfigurationError(f"counts must be positive: {counts}")
    if syn_domain.name == target_domain.name:
        raise ConfigurationError("synthetic and target domains must have distinct names")
    out = Path(out_dir)
    if out.exists():
        if not overwrite:
            raise FileExistsError(f"{out} exists; pass overwrite=True to replace it")
        shutil.rmtree(out)
    for sub in ("sharp", "blurry", "synthetic", "test/sharp", "test/blurry"):
        (out / sub).mkdir(parents=True)

    manifest = DatasetManifest(out, seed, {syn_domain.name: syn_domain, target_domain.name: target_domain})
    base = seed * 1_000_000
    n_s, n_b, n_t = counts["sharp"], counts["blurry"], counts["test"]
    sharp_ids = range(base, base + n_s)
    blurry_ids = range(base + n_s, base + n_s + n_b)
    test_ids = range(base + n_s + n_b, base + n_s + n_b + n_t)

    def add(role, scene_id, file, domain=None, kseed=None, nseed=None):
        manifest.entries.append(
            {"role": role, "scene_id": scene_id, "file": file, "domain": domain,
             "kernel_seed": kseed, "noise_seed": nseed}
        )

    def degrade(img, domain, scene_id, tag):
        kseed, nseed = _derive_seed(seed, scene_id, tag, 1), _derive_seed(seed, scene_id, tag, 2)
        return quantize(apply_blur(img, make_kernel(domain, kseed), domain.noise_sigma, nseed)), kseed, nseed

    sharp_imgs = {}
    for sid in sharp_ids:
        img = quantize(gen_scene(sid, size))
        sharp_imgs[sid] = img
        save_image(out / f"sharp/{sid}.png", img)
        add("sharp", sid, f"sharp/{sid}.png")
    for sid in blurry_ids:
        y, ks, ns = degrade(quantize(gen_scene(sid, size)), target_domain, sid, 0)
        save_image(out / f"blurry/{sid}.png", y)
        add("blurry", sid, f"blurry/{sid}.png", target_domain.name, ks, ns)
    sharp_list = list(sharp_ids)
    for i in range(counts["synthetic"]):
        sid = sharp_list[i % n_s]
        y, ks, ns = degrade(sharp_imgs[sid], syn_domain, sid, 1 + i // n_s)
        name = f"synthetic/{sid}_{i // n_s}.png"
        save_image(out / name, y)
        add("synthetic", sid, name, syn_domain.name, ks, ns)
    for sid in test_ids:
        x = quantize(gen_scene(sid, size))
        y, ks, ns = degrade(x, target_domain, sid, 0)
        save_image(out / f"test/sharp/{sid}.png", x)
        save_image(out / f"test/blurry/{sid}.png", y)
        add("test_sharp", sid, f"test/sharp/{sid}.png")
        add("test_blurry", sid, f"test/blurry/{sid}.png", target_domain.name, ks, ns)

    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1))
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    domains = {k: DomainSpec.from_dict(v) for k, v in doc["domains"].items()}
    return DatasetManifest(path.parent, doc["seed"], domains, doc["entries"])
