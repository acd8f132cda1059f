import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dignet.metrics import mean_acc, metrics_update, miou, new_confusion, pixel_acc, summarize
from oracles import confusion_tally, metrics_from_tally

FROZEN = np.array([[2, 1, 0], [0, 3, 1], [1, 0, 2]])


def test_frozen_confusion_values():
    assert miou(FROZEN) == pytest.approx(0.5333333, abs=1e-6)
    assert pixel_acc(FROZEN) == pytest.approx(0.7, abs=1e-12)
    assert mean_acc(FROZEN) == pytest.approx(0.6944444, abs=1e-6)


def test_perfect_prediction():
    truth = np.array([[0, 1], [2, 2]])
    s = summarize(metrics_update(new_confusion(3), truth, truth))
    assert s == {"miou": 1.0, "pacc": 1.0, "macc": 1.0}


def test_absent_class_excluded():
    truth = np.array([0, 0, 1, 1])
    cm = metrics_update(new_confusion(4), truth, truth)
    assert miou(cm) == 1.0 and mean_acc(cm) == 1.0


def test_ignore_index_and_errors():
    truth = np.array([0, 255, 1])
    pred = np.array([0, 1, 0])
    cm = metrics_update(new_confusion(2), pred, truth)
    assert cm.sum() == 2 and cm[1, 0] == 1
    with pytest.raises(ValueError):
        metrics_update(new_confusion(2), np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(ValueError):
        metrics_update(new_confusion(2), np.array([0]), np.array([0, 1]))
    with pytest.raises(ValueError):
        miou(new_confusion(2))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 10_000))
def test_matches_tally_oracle(k, n, seed):
    g = np.random.default_rng(seed)
    truth = g.integers(0, k, n)
    truth[g.random(n) < 0.1] = 255
    pred = g.integers(0, k, n)
    cm = metrics_update(new_confusion(k), pred, truth)
    assert cm.tolist() == confusion_tally(pred, truth, k)
    if cm.sum():
        want = metrics_from_tally(cm.tolist())
        got = (miou(cm), pixel_acc(cm), mean_acc(cm))
        np.testing.assert_allclose(got, want, rtol=1e-12)


def test_accumulation_is_additive(rng):
    a, b = rng.integers(0, 3, (2, 50))
    c, d = rng.integers(0, 3, (2, 50))
    cm = metrics_update(metrics_update(new_confusion(3), a, b), c, d)
    np.testing.assert_array_equal(cm, metrics_update(new_confusion(3),
                                                     np.r_[a, c], np.r_[b, d]))


def test_spec_examples():
    t = np.random.default_rng(0).integers(0, 2, (4, 4))
    cm = metrics_update(new_confusion(2), t, t)
    assert cm.sum() == 16 and cm[0, 1] == cm[1, 0] == 0
    same = metrics_update(cm, t, np.full((4, 4), 255))
    np.testing.assert_array_equal(same, cm)
    truth = np.array([0, 0, 1, 1])
    wrong = metrics_update(new_confusion(2), 1 - truth, truth)
    assert miou(wrong) == 0.0 and pixel_acc(wrong) == 0.0


def test_miou_one_iff_full_diagonal(rng):
    for _ in range(20):
        cm = np.diag(rng.integers(0, 3, 3))
        off = rng.random() < 0.5
        if off:
            cm[0, 1] += 1
        if cm.sum() == 0:
            continue
        vals = summarize(cm)
        assert all(0 <= v <= 1 for v in vals.values())
        present = (cm.sum(0) + cm.sum(1)) > 0
        assert (vals["miou"] == 1.0) == (not off and present.all() or not off)
