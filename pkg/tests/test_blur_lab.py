import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blurdecouple import blur_lab
from blurdecouple.blur_lab import DomainSpec, apply_blur, make_kernel
from blurdecouple.errors import ConfigurationError
from oracles import conv_loop


def test_delta_kernel_is_identity():
    k = make_kernel(DomainSpec("d", "delta"), 0)
    assert k.shape == (1, 1) and k[0, 0] == 1.0


def test_linear_length3_angle0_is_uniform_row():
    k = make_kernel(DomainSpec("l", "linear_motion", length=(3, 3), angle=(0.0, 0.0)), 0)
    assert k.shape == (3, 3)
    np.testing.assert_allclose(k[1], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    assert k[0].sum() == 0 and k[2].sum() == 0


def test_random_walk_seed7_sums_to_one_within_grid():
    k = make_kernel(DomainSpec("w", "random_walk", steps=9, step_sigma=1.0), 7)
    assert abs(k.sum() - 1.0) < 1e-12
    assert k.ndim == 2 and k.shape[0] == k.shape[1] and k.shape[0] % 2 == 1
    assert (k >= 0).all() and np.count_nonzero(k) <= k.size


@pytest.mark.parametrize("family", ["linear_motion", "random_walk", "defocus"])
@pytest.mark.parametrize("seed", [0, 1, 17])
def test_kernels_normalized_deterministic(family, seed):
    spec = DomainSpec("x", family)
    k = make_kernel(spec, seed)
    assert abs(k.sum() - 1) < 1e-12 and (k >= 0).all()
    assert np.array_equal(k, make_kernel(spec, seed))


@pytest.mark.parametrize("kwargs", [
    {"family": "nope"},
    {"family": "linear_motion", "length": (0, 3)},
    {"family": "linear_motion", "length": (3.5, 4)},
    {"family": "random_walk", "step_sigma": 0.0},
    {"family": "defocus", "radius": (0.0, 1.0)},
    {"family": "delta", "noise_sigma": -1.0},
])
def test_bad_domain_rejected(kwargs):
    with pytest.raises(ConfigurationError):
        DomainSpec("bad", **kwargs)


def test_delta_blur_no_noise_is_identity():
    x = np.random.default_rng(0).uniform(-1, 1, (9, 7, 3))
    assert np.array_equal(apply_blur(x, np.ones((1, 1))), x)


def test_impulse_response_three_tap():
    x = np.full((7, 7, 3), 0.0)
    x[3, 3, :] = 1.0
    k = np.zeros((3, 3))
    k[1] = 1 / 3
    y = apply_blur(x, k)
    np.testing.assert_allclose(y[3, 2:5, 0], [1 / 3] * 3, atol=1e-15)
    assert abs(y[..., 0].sum() - 1.0) < 1e-12
    assert np.count_nonzero(y[..., 0]) == 3


@pytest.mark.parametrize("case", range(50))
def test_convolution_matches_loop_oracle(case):
    rng = np.random.default_rng(1000 + case)
    h, w = rng.integers(5, 12, size=2)
    ks = int(rng.choice([1, 3, 5]))
    x = rng.uniform(-1, 1, (h, w, 2))
    k = rng.uniform(0, 1, (ks, ks))
    k /= k.sum()
    ref = np.clip(conv_loop(x, k), -1, 1)
    assert np.abs(apply_blur(x, k) - ref).max() <= 1e-6


def test_asymmetric_kernel_orientation():
    # a kernel with all mass at (0, 0) shifts content towards +row/+col (convolution, not correlation)
    x = np.zeros((7, 7, 1))
    x[3, 3] = 1.0
    k = np.zeros((3, 3))
    k[0, 0] = 1.0
    np.testing.assert_array_equal(apply_blur(x, k), conv_loop(x, k))
    assert apply_blur(x, k)[2, 2, 0] == 1.0


@pytest.mark.parametrize("k", [np.ones((2, 2)) / 4, np.ones((3, 5)) / 15, np.ones((9, 9)) / 81])
def test_bad_kernel_shapes(k):
    with pytest.raises(ValueError):
        apply_blur(np.zeros((5, 5, 3)), k)


def test_noise_is_seeded_and_clamped():
    x = np.full((8, 8, 3), 0.99)
    k = np.ones((1, 1))
    a = apply_blur(x, k, 0.5, seed=3)
    assert np.array_equal(a, apply_blur(x, k, 0.5, seed=3))
    assert not np.array_equal(a, apply_blur(x, k, 0.5, seed=4))
    assert a.max() <= 1 and a.min() >= -1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_scene_range_and_determinism(seed):
    img = blur_lab.gen_scene(seed, 32)
    assert img.shape == (32, 32, 3) and img.min() >= -1 and img.max() <= 1
    assert np.array_equal(img, blur_lab.gen_scene(seed, 32))


def test_edge_predicate_sweep():
    assert all(blur_lab.edge_strength(blur_lab.gen_scene(s)) > 0.5 for s in range(0, 1000, 7))


@settings(max_examples=50, deadline=None)
@given(v=st.integers(0, 255))
def test_uint8_roundtrip(v):
    arr = np.full((2, 2, 3), v, dtype=np.uint8)
    assert np.array_equal(blur_lab.to_uint8(blur_lab.from_uint8(arr)), arr)


def test_gopro_ratio_row():
    assert blur_lab.GOPRO_SPLIT == {"sharp": 1261, "blurry": 842, "synthetic": 4210, "test": 1111}


def test_default_counts_keep_relative_sizes():
    d = blur_lab.DEFAULT_COUNTS
    assert d["synthetic"] > d["sharp"] > d["blurry"] > d["test"]


def test_manifest_roles_and_disjointness(tiny_manifest):
    m = tiny_manifest
    sharp = {e["scene_id"] for e in m.role("sharp")}
    blurry = {e["scene_id"] for e in m.role("blurry")}
    test = {e["scene_id"] for e in m.role("test_blurry")}
    assert len(sharp) == 16 and len(blurry) == 16 and len(m.role("synthetic")) == 32 and len(test) == 6
    assert not sharp & blurry and not sharp & test and not blurry & test
    assert {e["scene_id"] for e in m.role("synthetic")} <= sharp
    assert {e["domain"] for e in m.role("synthetic")} == {blur_lab.SYNTHETIC_DOMAIN.name}
    assert {e["domain"] for e in m.role("blurry") + m.role("test_blurry")} == {blur_lab.TARGET_DOMAIN.name}


def test_synthetic_entries_rederive(tiny_manifest):
    m = tiny_manifest
    for sharp, syn in m.synthetic_pairs()[:20]:
        x = blur_lab.load_image(m.path(sharp))
        k = make_kernel(m.domains[syn["domain"]], syn["kernel_seed"])
        expected = blur_lab.quantize(apply_blur(x, k, m.domains[syn["domain"]].noise_sigma, syn["noise_seed"]))
        assert np.array_equal(blur_lab.load_image(m.path(syn)), expected)


def test_manifest_reload(tiny_manifest):
    again = blur_lab.load_manifest(tiny_manifest.root / "manifest.json")
    assert again.entries == tiny_manifest.entries
    assert again.domains == tiny_manifest.domains


def test_build_refuses_existing_dir(tiny_manifest):
    with pytest.raises(FileExistsError):
        blur_lab.build_dataset(counts={"sharp": 1, "blurry": 1, "synthetic": 1, "test": 1},
                               out_dir=tiny_manifest.root)


def test_build_is_deterministic(tmp_path):
    counts = {"sharp": 3, "blurry": 2, "synthetic": 4, "test": 2}
    a = blur_lab.build_dataset(counts=counts, seed=5, out_dir=tmp_path / "a", size=16)
    b = blur_lab.build_dataset(counts=counts, seed=5, out_dir=tmp_path / "b", size=16)
    assert a.entries == b.entries
    for e in a.entries:
        assert (tmp_path / "a" / e["file"]).read_bytes() == (tmp_path / "b" / e["file"]).read_bytes()


def test_motion_blur_lowers_sharpness():
    x = blur_lab.gen_scene(0)
    k = make_kernel(DomainSpec("l", "linear_motion", length=(9, 9)), 0)
    from blurdecouple.metrics import gradient_magnitude
    assert gradient_magnitude(apply_blur(x, k)) < gradient_magnitude(x)
    assert math.isfinite(gradient_magnitude(x))
