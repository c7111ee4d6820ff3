import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featood.corruptions import (GEOMETRIC, IDENTITY, KINDS, CorruptionSpec, apply_corruption,
                                 corrupt_sample, corruption_suite)
from featood.numerics import fft3, make_rng
from featood.volumes import PhantomConfig, generate_samples, load_manifest

PAIRS = [("Bias", 0.5), ("Motion", 2), ("Ghost", 0.5), ("Spikes", 3), ("Downsample", 3),
         ("Noise", 0.2), ("Scaling", 1.3), ("Registration", 1.0), ("Gamma", 3.0), ("Truncation", 1)]
KSPACE = {"Motion", "Ghost", "Spikes"}


@pytest.fixture(scope="module")
def phantom():
    return generate_samples("ID", 1, PhantomConfig(), 3)[0]


@pytest.mark.parametrize("kind", sorted(IDENTITY))
def test_identity_strength(kind, phantom):
    out = apply_corruption(CorruptionSpec(kind, IDENTITY[kind], 5), phantom.image)
    err = np.abs(out.astype(np.float64) - phantom.image).max()
    if kind in KSPACE:
        assert err < 1e-5
    else:
        assert err == 0.0


def test_noise_variance():
    img = np.zeros((32, 32, 32), np.float64)
    out = apply_corruption(CorruptionSpec("Noise", 0.5, 17), img)
    assert abs(np.var(out - img) - 0.25) < 0.05 * 0.25


@pytest.mark.parametrize("kind,s", PAIRS)
def test_deterministic_and_extent_preserving(kind, s, phantom):
    spec = CorruptionSpec(kind, s, 99)
    a, ma = apply_corruption(spec, phantom.image, phantom.mask)
    b, mb = apply_corruption(spec, phantom.image, phantom.mask)
    assert a.tobytes() == b.tobytes() and ma.tobytes() == mb.tobytes()
    assert a.shape == phantom.image.shape and a.dtype == phantom.image.dtype
    assert ma.shape == phantom.mask.shape


@pytest.mark.parametrize("kind", sorted(GEOMETRIC))
def test_geometric_masks_keep_labels(kind, phantom):
    s = dict(PAIRS)[kind]
    for seed in range(3):
        _, m = apply_corruption(CorruptionSpec(kind, s, seed), phantom.image, phantom.mask)
        assert set(np.unique(m)) <= {0, 1}


def test_non_geometric_mask_unchanged(phantom):
    _, m = apply_corruption(CorruptionSpec("Noise", 0.3, 1), phantom.image, phantom.mask)
    np.testing.assert_array_equal(m, phantom.mask)


def test_truncation_zeroes_half(phantom):
    out = apply_corruption(CorruptionSpec("Truncation", 1, 0), phantom.image)
    assert np.mean(out == 0) >= 0.5
    assert not out[16:].any()


def test_gamma_keeps_range(phantom):
    out = apply_corruption(CorruptionSpec("Gamma", 4.0, 0), phantom.image)
    assert out.min() == pytest.approx(phantom.image.min(), abs=1e-6)
    assert out.max() == pytest.approx(phantom.image.max(), abs=1e-6)
    assert np.mean(out) < np.mean(phantom.image)


def test_downsample_repeats_planes():
    img = np.random.default_rng(0).normal(size=(16, 16, 16))
    out = apply_corruption(CorruptionSpec("Downsample", 4, 3), img)
    # exactly one axis now has runs of four identical planes
    runs = []
    for ax in range(3):
        planes = np.moveaxis(out, ax, 0)
        runs.append(all(np.array_equal(planes[i], planes[i - i % 4]) for i in range(16)))
    assert sum(runs) == 1


def test_scaling_zoom_about_center():
    img = np.zeros((16, 16, 16))
    img[6:10, 6:10, 6:10] = 1.0
    out = apply_corruption(CorruptionSpec("Scaling", 2.0, 0), img)
    assert (out > 0.5).sum() > 4 * (img > 0.5).sum()
    assert out[7:9, 7:9, 7:9].min() == 1.0


@settings(max_examples=25, deadline=None)
@given(s=st.floats(0.0, 1.0), seed=st.integers(0, 2**32))
def test_ghost_attenuates_energy(s, seed):
    img = np.random.default_rng(seed).normal(size=(16, 16, 16))
    out = apply_corruption(CorruptionSpec("Ghost", s, seed), img)
    e_in = np.sum(np.abs(fft3(img)) ** 2)
    e_out = np.sum(np.abs(fft3(out)) ** 2)
    assert e_out <= e_in * (1 + 1e-6)


def test_spikes_add_energy(phantom):
    out = apply_corruption(CorruptionSpec("Spikes", 4, 1), phantom.image)
    assert np.abs(out - phantom.image).max() > 0.01


def test_invalid_specs():
    with pytest.raises(ValueError, match="unknown corruption kind"):
        CorruptionSpec("Blur", 1.0)
    with pytest.raises(ValueError):
        CorruptionSpec("Noise", -1.0)
    with pytest.raises(ValueError):
        CorruptionSpec("Gamma", float("nan"))
    with pytest.raises(ValueError, match="non-finite"):
        apply_corruption(CorruptionSpec("Noise", 0.1), np.full((8, 8, 8), np.nan))


def test_ghost_requires_power_of_two():
    with pytest.raises(ValueError):
        apply_corruption(CorruptionSpec("Ghost", 0.5), np.zeros((8, 6, 8)))


def test_corrupt_sample_metadata(phantom):
    out = corrupt_sample(CorruptionSpec("Gamma", 2.0), phantom)
    assert out.group == "Transform:Gamma"
    assert out.id.startswith(phantom.id)


def test_suite_counts_and_files(tmp_path):
    tests = generate_samples("ID", 4, PhantomConfig(size=16, lesion_radius_range=(0.1, 0.14)), 2)
    out = corruption_suite(tests, dict(PAIRS), 7, tmp_path)
    assert sorted(out) == sorted(KINDS)
    assert sum(len(v) for v in out.values()) == 4 * len(KINDS)
    m = load_manifest(tmp_path / "Gamma" / "manifest.json")
    assert len(m) == 4 and all(e.group == "Transform:Gamma" for e in m.samples)
    again = corruption_suite(tests, dict(PAIRS), 7)
    for kind in KINDS:
        for a, b in zip(out[kind], again[kind]):
            assert a.image.tobytes() == b.image.tobytes()


def test_suite_empty_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert corruption_suite([], {}, 0) == {}
    assert "empty" in caplog.text


def test_suite_unknown_kind():
    with pytest.raises(ValueError, match="Blur"):
        corruption_suite([], {"Blur": 1.0}, 0)
