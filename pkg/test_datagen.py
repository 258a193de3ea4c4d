import os

import numpy as np
import pytest

from dglab.datagen import (
    Dataset,
    DomainSpec,
    ShiftRanges,
    Variant,
    apply_domain_shift,
    build_dataset,
    content_digest,
    draw_domain_spec,
    generate_phantom,
    shift_arrays,
)
from dglab.errors import ConfigurationError


def brute_force_sphere_count(radius: float) -> int:
    r = int(np.ceil(radius))
    count = 0
    for z in range(-r, r + 1):
        for y in range(-r, r + 1):
            for x in range(-r, r + 1):
                if z * z + y * y + x * x <= radius * radius:
                    count += 1
    return count


def test_phantom_foreground_fraction():
    sample = generate_phantom(7, (32, 32, 32), (2, 4))
    assert sample.variant is Variant.SOURCE
    assert 0.0 < sample.mask.foreground_fraction < 0.05


def test_phantom_is_deterministic():
    a = generate_phantom(11)
    b = generate_phantom(11)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.mask.data, b.mask.data)
    c = generate_phantom(12)
    assert not np.array_equal(a.image.data, c.image.data)


def test_fixed_radius_matches_rasterized_sphere():
    expected = brute_force_sphere_count(2.0)
    for seed in range(5):
        sample = generate_phantom(seed, (32, 32, 32), (2, 2))
        assert int(sample.mask.data.sum()) == expected


def test_foreground_fraction_bound_over_many_seeds():
    for seed in range(100):
        fraction = generate_phantom(seed, (32, 32, 32), (2, 4)).mask.foreground_fraction
        assert 0.0 < fraction < 0.05


def test_phantom_rejects_small_shapes_and_radii():
    with pytest.raises(ConfigurationError):
        generate_phantom(0, (8, 32, 32))
    with pytest.raises(ConfigurationError):
        generate_phantom(0, (32, 32, 32), (2, 9))
    with pytest.raises(ConfigurationError):
        generate_phantom(0, (16, 16, 16), (4, 4))


def test_identity_shift_keeps_the_image():
    sample = generate_phantom(3)
    shifted = apply_domain_shift(sample, DomainSpec(rng_seed=5))
    assert shifted.variant is Variant.TARGET
    assert np.array_equal(shifted.image.data, sample.image.data)
    assert np.array_equal(shifted.mask.data, sample.mask.data)


def test_gain_doubles_every_voxel():
    sample = generate_phantom(3)
    shifted = apply_domain_shift(sample, DomainSpec(intensity_gain=2.0))
    assert np.array_equal(shifted.image.data, sample.image.data * 2)


def test_full_pipeline_is_reproducible():
    sample = generate_phantom(4)
    spec = draw_domain_spec(1, np.random.default_rng(0), ShiftRanges())
    a = apply_domain_shift(sample, spec)
    b = apply_domain_shift(sample, spec)
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert a.mask.data.tobytes() == b.mask.data.tobytes()


def test_mask_untouched_without_geometric_stage():
    sample = generate_phantom(5)
    spec = DomainSpec(
        intensity_gain=1.3, intensity_offset=0.05, noise_sigma=0.05, smoothing_sigma=0.8,
        histogram_shift=0.2, bias_field_amplitude=0.2, rng_seed=9,
    )
    assert np.array_equal(apply_domain_shift(sample, spec).mask.data, sample.mask.data)


def test_pointwise_intensity_stages_are_monotone():
    image = np.linspace(0.0, 1.0, 16 ** 3, dtype=np.float32).reshape(16, 16, 16)
    mask = np.zeros_like(image, dtype=np.uint8)
    spec = DomainSpec(intensity_gain=1.3, intensity_offset=-0.1, histogram_shift=0.25)
    out, _ = shift_arrays(image, mask, spec)
    assert np.all(np.diff(out.ravel()) >= 0)


def test_shift_requires_source_and_positive_gain():
    target = apply_domain_shift(generate_phantom(1), DomainSpec())
    with pytest.raises(ConfigurationError):
        apply_domain_shift(target, DomainSpec())
    with pytest.raises(ConfigurationError):
        DomainSpec(intensity_gain=0.0)


def test_build_dataset_layout(tmp_path):
    root = str(tmp_path / "ds")
    dataset = build_dataset(root, 4, 2, 42, shape=(16, 16, 16), aneurysm_radius_range=(2, 2))
    assert dataset.domains == [0, 1, 2, 3]
    assert len(dataset) == 8
    for k in range(4):
        files = sorted(os.listdir(os.path.join(root, f"domain_{k}")))
        assert files == [
            "sample_0.img.raw", "sample_0.json", "sample_0.msk.raw",
            "sample_1.img.raw", "sample_1.json", "sample_1.msk.raw",
        ]
    sample = dataset.load(2, 1)
    assert sample.domain_id == 2
    assert sample.variant is Variant.SOURCE
    assert sample.image.shape == (16, 16, 16)
    assert os.path.getsize(os.path.join(root, "domain_2", "sample_1.img.raw")) == 16 ** 3 * 4


def test_build_dataset_domains_differ(tmp_path):
    dataset = build_dataset(str(tmp_path / "ds"), 2, 1, 0, shape=(16, 16, 16), aneurysm_radius_range=(2, 2))
    assert dataset.domain_spec(0).parameters() != dataset.domain_spec(1).parameters()


def test_rebuild_gives_identical_files(tmp_path):
    a = build_dataset(str(tmp_path / "a"), 2, 2, 42, shape=(16, 16, 16), aneurysm_radius_range=(2, 2))
    b = build_dataset(str(tmp_path / "b"), 2, 2, 42, shape=(16, 16, 16), aneurysm_radius_range=(2, 2), workers=3)
    assert a.digest() == b.digest()
    assert content_digest(a.root) == a.digest()


def test_build_dataset_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigurationError):
        build_dataset(str(tmp_path / "one"), 1, 1, 0, shape=(16, 16, 16), aneurysm_radius_range=(2, 2))
    occupied = tmp_path / "occupied"
    occupied.mkdir()
    (occupied / "keep.txt").write_text("x")
    with pytest.raises(ConfigurationError):
        build_dataset(str(occupied), 2, 1, 0, shape=(16, 16, 16), aneurysm_radius_range=(2, 2))


def test_open_missing_dataset(tmp_path):
    with pytest.raises(ConfigurationError):
        Dataset.open(str(tmp_path / "nope"))
