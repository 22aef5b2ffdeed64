import numpy as np
import pytest
from hypothesis import given, strategies as st

from segxray.phantom import (BRAIN, CORE, EDEMA, ENHANCING, NOISE_STD, DatasetHandle,
                             generate_dataset, generate_sample)


def _proper_subset(a, b):
    return bool(np.all(a <= b)) and a.sum() < b.sum()


def test_nesting_holds_for_default_dataset():
    for s in DatasetHandle(1000, 0):
        m = s.masks
        assert np.all(m["et"] <= m["tc"]) and np.all(m["tc"] <= m["wt"]) and np.all(m["wt"] <= m["brain"])
        if s.tumor:
            assert m["et"].any()
            assert _proper_subset(m["et"], m["tc"])
            assert _proper_subset(m["tc"], m["wt"])
            assert _proper_subset(m["wt"], m["brain"])


@given(st.integers(0, 2**31 - 1), st.integers(0, 10_000))
def test_labels_and_masks_agree(seed, index):
    s = generate_sample(seed, index, 48, 40, tumor=True)
    lab = s.labels
    assert np.array_equal(s.masks["wt"], np.isin(lab, [EDEMA, CORE, ENHANCING]))
    assert np.array_equal(s.masks["tc"], np.isin(lab, [CORE, ENHANCING]))
    assert np.array_equal(s.masks["et"], lab == ENHANCING)
    assert np.array_equal(s.masks["brain"], lab >= BRAIN)
    assert s.image.shape == (4, 48, 40)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_tumor_free_sample():
    s = generate_sample(3, 7, tumor=False)
    assert s.masks["brain"].any()
    assert not (s.masks["wt"].any() or s.masks["tc"].any() or s.masks["et"].any())


def test_deterministic():
    a, b = generate_sample(9, 4), generate_sample(9, 4)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    h = DatasetHandle(5, 2)
    assert all(np.array_equal(x.image, y.image) for x, y in zip(h, generate_dataset(h)))


def test_tumor_fraction_assignment():
    h = DatasetHandle(200, 0, tumor_fraction=0.9)
    assert sum(h.is_tumor(i) for i in range(200)) == 180
    assert list(DatasetHandle(0, 0)) == []


def test_intensity_contrast():
    for s in DatasetHandle(50, 5):
        if not s.tumor:
            continue
        wt, rest = s.masks["wt"], s.masks["brain"] & ~s.masks["wt"]
        diffs = [abs(s.image[c][wt].mean() - s.image[c][rest].mean()) for c in range(4)]
        assert sum(d >= NOISE_STD for d in diffs) >= 2


def test_small_sizes_rejected():
    with pytest.raises(ValueError):
        generate_sample(0, 0, 16, 64)
