import numpy as np
import pytest

from moce.io import dataset_bytes
from moce.synthetic import (
    DomainSpec, SyntheticCorpusConfig, domain_separability, gen_synthetic, pixel_statistics,
    reference_config,
)


def _four_class(seed=0, n=50, size=16):
    return SyntheticCorpusConfig(domains=[DomainSpec("blobs", 4), DomainSpec("gratings", 4)],
                                 images_per_class=n, image_size=size, seed=seed)


def test_counts_and_class_ranges():
    ds = gen_synthetic(_four_class())
    assert len(ds) == 400
    assert np.bincount(ds.labels).tolist() == [50] * 8
    assert set(ds.labels[ds.domains == 0]) == {0, 1, 2, 3}
    assert set(ds.labels[ds.domains == 1]) == {4, 5, 6, 7}
    assert ds.images.dtype == np.uint8 and ds.images.shape[1:] == (16, 16, 3)


def test_equal_seeds_byte_identical():
    a = dataset_bytes(gen_synthetic(_four_class(seed=3, n=5)))
    assert a == dataset_bytes(gen_synthetic(_four_class(seed=3, n=5)))
    assert a != dataset_bytes(gen_synthetic(_four_class(seed=4, n=5)))


def test_domains_separable_on_reference_corpus():
    ds = gen_synthetic(reference_config(seed=0, images_per_class=60))
    assert len(ds) == 2 * 8 * 60
    assert domain_separability(ds) >= 0.95


def test_pixel_statistics_shape_and_scale():
    ds = gen_synthetic(_four_class(n=2))
    s = pixel_statistics(ds.images)
    np.testing.assert_allclose(s, pixel_statistics(ds.float_images()), atol=1e-12)
    assert s.shape == (16, 8)


def test_config_round_trip_and_validation():
    cfg = _four_class()
    assert SyntheticCorpusConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.class_offsets() == [0, 4]
    with pytest.raises(ValueError):
        DomainSpec("stripes")
    with pytest.raises(ValueError):
        DomainSpec("blobs", 0)


def test_explicit_class_params_are_used():
    spec = DomainSpec("gratings", 2, [{"theta": 0.0, "freq": 0.1}, {"theta": 1.5, "freq": 0.3}])
    ds = gen_synthetic(SyntheticCorpusConfig(domains=[spec], images_per_class=3, image_size=16))
    assert np.bincount(ds.labels).tolist() == [3, 3]
