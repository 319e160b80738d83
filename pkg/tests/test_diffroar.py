import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdinterp.diffroar import (
    DiffRoarConfig,
    diffroar,
    mask_dataset,
    mean_image,
    random_attributor,
    rank_pixels,
    removal_count,
    saliency_attributor,
)
from kdinterp.distill import TrainConfig
from kdinterp.errors import ValidationError
from kdinterp.model import conv_net


def test_rank_example_and_ties():
    assert rank_pixels(np.array([[3, 1], [2, 2]])).tolist() == [0, 2, 3, 1]
    assert rank_pixels(np.full((3, 4), 0.5)).tolist() == list(range(12))
    assert rank_pixels(np.array([[-5, 1], [4, 0]])).tolist() == [0, 2, 1, 3]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), levels=st.integers(1, 20))
def test_rank_is_a_bijection_in_descending_order(seed, levels):
    a = np.random.default_rng(seed).integers(0, levels, (6, 7)).astype(float)
    order = rank_pixels(a)
    assert sorted(order.tolist()) == list(range(42))
    vals = a.ravel()[order]
    assert np.all(np.diff(vals) <= 0)
    same = np.diff(vals) == 0
    assert np.all(np.diff(order)[same] > 0)


def _maps(data, seed=0):
    return np.random.default_rng(seed).random((len(data), *data.images.shape[2:]))


@pytest.mark.parametrize("frac", [0.1, 0.3, 0.5, 0.9])
def test_masked_counts_exact_and_variants_disjoint(frac, small_data):
    train_d, _ = small_data
    d = train_d.subset(np.arange(8))
    maps = _maps(d)
    sentinel = np.full(d.images.shape[1:], -1.0, np.float32)
    top = mask_dataset(d, maps, frac, "TOP", sentinel)
    bottom = mask_dataset(d, maps, frac, "BOTTOM", sentinel)
    k = removal_count(frac, 32 * 32)
    for i in range(len(d)):
        t, b = top.images[i, 0] == -1, bottom.images[i, 0] == -1
        assert t.sum() == b.sum() == k
        # past one half both variants must share pixels; the overlap is then exactly 2k - HW
        assert (t & b).sum() == max(0, 2 * k - 32 * 32)
    np.testing.assert_array_equal(top.labels, d.labels)
    np.testing.assert_array_equal(top.masks, d.masks)


@pytest.mark.parametrize("frac", [0.1, 0.3, 0.7])
def test_top_and_complementary_bottom_cover_every_pixel(frac, small_data):
    d = small_data[0].subset(np.arange(5))
    maps = _maps(d, 1)
    sentinel = np.full(d.images.shape[1:], -1.0, np.float32)
    t = mask_dataset(d, maps, frac, "TOP", sentinel).images == -1
    b = mask_dataset(d, maps, round(1 - frac, 10), "BOTTOM", sentinel).images == -1
    assert np.all(t ^ b)


def test_zero_count_fraction_leaves_data_unchanged(small_data):
    d = small_data[0].subset(np.arange(3))
    out = mask_dataset(d, _maps(d), 1e-4, "TOP", np.zeros(d.images.shape[1:], np.float32))
    np.testing.assert_array_equal(out.images, d.images)


def test_train_mean_fill(small_data):
    train_d, _ = small_data
    fill = mean_image(train_d)
    independent = np.zeros(train_d.images.shape[1:], np.float64)
    for img in train_d.images:
        independent += img
    independent /= len(train_d)
    np.testing.assert_allclose(fill, independent, atol=1e-6)
    d = train_d.subset(np.arange(4))
    maps = _maps(d, 2)
    out = mask_dataset(d, maps, 0.5, "TOP", fill)
    for i in range(4):
        sel = rank_pixels(maps[i])[:512]
        np.testing.assert_allclose(out.images[i, 0].ravel()[sel], independent[0].ravel()[sel], atol=1e-6)


def test_mask_dataset_errors(small_data):
    d = small_data[0].subset(np.arange(3))
    fill = mean_image(d)
    with pytest.raises(ValidationError):
        mask_dataset(d, _maps(d)[:2], 0.5, "TOP", fill)
    with pytest.raises(ValidationError):
        mask_dataset(d, _maps(d), 1.0, "TOP", fill)
    with pytest.raises(ValidationError):
        mask_dataset(d, _maps(d), 0.5, "MIDDLE", fill)


def test_config_validation():
    with pytest.raises(ValidationError):
        DiffRoarConfig(fractions=(0.5, 0.3))
    with pytest.raises(ValidationError):
        DiffRoarConfig(fractions=(0.0, 0.3))
    with pytest.raises(ValidationError):
        DiffRoarConfig(n_seeds=0)
    assert DiffRoarConfig().fractions == (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def test_random_attributor_ignores_image_content(small_data, small_model):
    d = small_data[1].subset(np.arange(4))
    att = random_attributor(5)
    a = att(*small_model, d)
    b = att(*small_model, d.with_images(np.zeros_like(d.images)))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a[0], a[1])


def test_diffroar_table_is_deterministic(small_data, small_model):
    train_d, test_d = small_data
    tr, te = train_d.subset(np.arange(40)), test_d.subset(np.arange(20))
    cfg = DiffRoarConfig(fractions=(0.3, 0.7), n_seeds=2, retrain=TrainConfig(epochs=1, batch_size=8))
    arch = conv_net((2, 2, 2), image_size=32)
    a = diffroar(small_model, tr, te, saliency_attributor(), cfg, retrain_arch=arch)
    b = diffroar(small_model, tr, te, saliency_attributor(), cfg, retrain_arch=arch)
    assert a == b
    assert [(r["fraction"], r["seed"]) for r in a["rows"]] == [(0.3, 0), (0.3, 1), (0.7, 0), (0.7, 1)]
    for r in a["rows"]:
        assert r["diffroar"] == pytest.approx(100 * (r["acc_bottom_removed"] - r["acc_top_removed"]))
    assert a["aggregate"]["n"] == 4
    assert a["aggregate"]["diffroar_mean"] == pytest.approx(np.mean([r["diffroar"] for r in a["rows"]]))
