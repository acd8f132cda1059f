import json

import numpy as np
import pytest

from dignet.data import (
    SyntheticSpec,
    generate_sample,
    load_dataset,
    make_dataset,
    split_seeds,
    write_dataset,
)


def test_generation_is_deterministic():
    spec = SyntheticSpec()
    (a, la), (b, lb) = generate_sample(spec, 42), generate_sample(spec, 42)
    assert a.data.tobytes() == b.data.tobytes() and la.tobytes() == lb.tobytes()
    assert a.shape == (1, 3, 64, 64) and a.data.dtype == np.float32
    assert 0 <= a.data.min() and a.data.max() <= 1
    assert not np.array_equal(generate_sample(spec, 43)[1], la)


@pytest.mark.parametrize("seed", range(5))
def test_single_disc_labels(seed):
    spec = SyntheticSpec(noise=0.0, shapes_per_image=(1, 1), foreground_classes=(2,))
    _, labels = generate_sample(spec, seed)
    assert set(np.unique(labels).tolist()) == {0, 2}


def test_labels_in_range_and_foreground_present():
    spec = SyntheticSpec()
    for s in range(50):
        _, labels = generate_sample(spec, s)
        assert labels.min() >= 0 and labels.max() < spec.num_classes
        assert (labels > 0).any()


def test_class_coverage_over_1000_seeds():
    spec = SyntheticSpec()
    seen = np.zeros(spec.num_classes)
    for s in range(1000):
        _, labels = generate_sample(spec, s)
        seen[np.unique(labels)] += 1
    assert np.all(seen / 1000 >= 0.05), seen


def test_splits_are_disjoint_and_divisible():
    tr, va = split_seeds(2000, 200)
    assert not set(tr) & set(va)
    with pytest.raises(ValueError):
        split_seeds(10, 10, 0, 5)
    ds = make_dataset(SyntheticSpec(), 3, 2)
    assert not set(ds.train.seeds) & set(ds.val.seeds)
    assert ds.train.images.shape[2] % 8 == 0 and ds.train.images.shape[3] % 8 == 0


def test_shared_texture_pairs_share_pixels():
    # classes 1 and 2 are drawn with the same texture; only geometry separates them
    base = dict(noise=0.0, shapes_per_image=(1, 1), small_object_prob=0.0)
    img1, lab1 = generate_sample(SyntheticSpec(foreground_classes=(1,), **base), 0)
    img2, lab2 = generate_sample(SyntheticSpec(foreground_classes=(2,), **base), 0)
    both = (lab1 == 1) & (lab2 == 2)
    assert both.sum() > 50
    np.testing.assert_array_equal(img1.data[0][:, both], img2.data[0][:, both])


def test_write_and_load_roundtrip(tmp_path):
    spec = SyntheticSpec(image_size=16)
    manifest = write_dataset(tmp_path, spec, 3, 2)
    assert sorted(p.name for p in (tmp_path / "images").iterdir())[-1] == "000004.ppm"
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    ds = load_dataset(tmp_path)
    ref = make_dataset(spec, 3, 2)
    np.testing.assert_array_equal(ds.train.images, ref.train.images)
    np.testing.assert_array_equal(ds.val.labels, ref.val.labels)
    assert ds.val.seeds == ref.val.seeds and ds.num_classes == 6


def test_invalid_specs():
    for kw in ({"num_classes": 1}, {"shapes_per_image": (2, 1)},
               {"shared_texture_pairs": ((1, 9),)}, {"image_size": 4}):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)
